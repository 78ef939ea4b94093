#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "afine/autodiff.hpp"
#include "afine/errors.hpp"
#include "afine/tensor.hpp"

namespace afine {

// Trainable parameter groups. The three-phase schedule freezes and thaws
// whole groups, so every tensor carries its group tag.
enum class ParamGroup { backbone, naturalness, fidelity, scale, calibration };

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::naturalness: return "naturalness";
    case ParamGroup::fidelity: return "fidelity";
    case ParamGroup::scale: return "scale";
    case ParamGroup::calibration: return "calibration";
  }
  return "?";
}

struct ParamEntry {
  std::string name;
  ParamGroup group;
  Tensor value;
};

// Ordered, name-addressable set of parameter tensors. Order is fixed at
// construction and drives checkpoint layout, so save/load round-trips are
// byte-identical.
class ParamSet {
 public:
  std::size_t add(std::string name, ParamGroup group, Tensor value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), group, std::move(value)});
    return entries_.size() - 1;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].value;
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return entries_[it->second].value;
  }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  std::uint64_t group_hash(ParamGroup g) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& e : entries_)
      if (e.group == g) h ^= tensor_hash(e.value) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Parameters bound onto a tape as leaves for one computation graph. The mask
// decides which groups are differentiated; frozen groups enter as constants.
class BoundParams {
 public:
  static BoundParams bind(Tape& tape, const ParamSet& set,
                          const std::function<bool(ParamGroup)>& trainable) {
    BoundParams b;
    b.set_ = &set;
    b.vars_.reserve(set.size());
    for (const auto& e : set.entries())
      b.vars_.push_back(tape.leaf(e.value, trainable && trainable(e.group)));
    return b;
  }

  static BoundParams bind_frozen(Tape& tape, const ParamSet& set) {
    return bind(tape, set, nullptr);
  }

  Var operator[](const std::string& name) const { return vars_[set_->index_of(name)]; }
  Var by_index(std::size_t i) const { return vars_[i]; }
  std::size_t size() const { return vars_.size(); }
  const ParamSet& set() const { return *set_; }

 private:
  const ParamSet* set_ = nullptr;
  std::vector<Var> vars_;
};

}  // namespace afine
