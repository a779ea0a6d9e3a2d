#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stclip/tensor.hpp"

namespace stclip {

struct ParamEntry {
  std::string name;
  Tensor value;
  bool frozen = false;
};

// Named parameters in insertion order, each with a frozen flag. Frozen
// entries never carry gradients and are never touched by optimizers.
class ParamStore {
 public:
  void add(std::string name, Tensor value, bool frozen = false);
  // Replaces the value of an existing entry; the shape must not change.
  void set(std::string_view name, Tensor value);
  void erase(std::string_view name);

  const Tensor& get(std::string_view name) const;
  const Tensor* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }
  bool frozen(std::string_view name) const;
  void set_frozen(std::string_view name, bool frozen);
  void freeze_where(const std::function<bool(std::string_view)>& is_frozen);

  std::span<const ParamEntry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t trainable_elements() const;

  // Copy in which every trainable entry is a fresh leaf that records
  // gradients; frozen entries are shared as-is.
  ParamStore with_grad() const;

 private:
  std::size_t index_of(std::string_view name) const;
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// FNV-1a over the shape and raw float bytes.
std::uint64_t checksum(const Tensor& t);

}  // namespace stclip
