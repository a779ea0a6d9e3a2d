#include "stclip/param_store.hpp"

#include <cstring>

#include "stclip/errors.hpp"

namespace stclip {

void ParamStore::add(std::string name, Tensor value, bool frozen) {
  if (name.empty()) throw InputError("parameter name must not be empty");
  if (!value.defined()) throw InputError("parameter '" + name + "' has no value");
  if (index_.count(name)) throw InputError("duplicate parameter name '" + name + "'");
  if (value.requires_grad()) value = value.detach();
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), frozen});
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

void ParamStore::set(std::string_view name, Tensor value) {
  auto& e = entries_[index_of(name)];
  if (value.shape() != e.value.shape())
    throw DimensionError("parameter '" + e.name + "' has shape " + shape_str(e.value.shape()) +
                         ", replacement has " + shape_str(value.shape()));
  e.value = value.requires_grad() ? value.detach() : std::move(value);
}

void ParamStore::erase(std::string_view name) {
  const auto i = index_of(name);
  entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(i));
  index_.clear();
  for (std::size_t k = 0; k < entries_.size(); ++k) index_.emplace(entries_[k].name, k);
}

const Tensor& ParamStore::get(std::string_view name) const { return entries_[index_of(name)].value; }

const Tensor* ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &entries_[it->second].value;
}

bool ParamStore::frozen(std::string_view name) const { return entries_[index_of(name)].frozen; }

void ParamStore::set_frozen(std::string_view name, bool frozen) {
  entries_[index_of(name)].frozen = frozen;
}

void ParamStore::freeze_where(const std::function<bool(std::string_view)>& is_frozen) {
  for (auto& e : entries_) e.frozen = is_frozen(e.name);
}

std::size_t ParamStore::trainable_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (!e.frozen) n += e.value.numel();
  return n;
}

ParamStore ParamStore::with_grad() const {
  ParamStore out;
  out.index_ = index_;
  out.entries_.reserve(entries_.size());
  for (const auto& e : entries_)
    out.entries_.push_back({e.name, e.frozen ? e.value : e.value.clone_leaf(true), e.frozen});
  return out;
}

std::uint64_t checksum(const Tensor& t) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (auto d : t.shape()) {
    const std::uint64_t v = d;
    feed(&v, sizeof v);
  }
  feed(t.data().data(), t.data().size_bytes());
  return h;
}

}  // namespace stclip
