#include "params.hpp"

#include "error.hpp"

namespace catf {

ParamStore::ParamStore(const ParamStore& other) { *this = other; }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  entries_.clear();
  for (const Entry& e : other.entries_) {
    entries_.push_back({e.name, e.kind, std::make_unique<Tensor>(*e.tensor)});
  }
  return *this;
}

Tensor& ParamStore::add(const std::string& name, Tensor t, ParamKind kind) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.push_back({name, kind, std::make_unique<Tensor>(std::move(t))});
  return *entries_.back().tensor;
}

Tensor& ParamStore::get(const std::string& name) {
  for (Entry& e : entries_) {
    if (e.name == name) return *e.tensor;
  }
  throw LookupError("unknown parameter '" + name + "'");
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const Entry& e : entries_) {
    if (e.name == name) return *e.tensor;
  }
  throw LookupError("unknown parameter '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
  for (const Entry& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

}  // namespace catf
