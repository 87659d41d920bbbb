#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "moemeta/tensor.hpp"

namespace moemeta {

struct ParamGroup {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

// Ordered collection of named parameter groups. Group order is insertion order
// and is part of the checkpoint format.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable = true);

  std::size_t size() const noexcept { return groups_.size(); }
  ParamGroup& operator[](std::size_t i) { return groups_[i]; }
  const ParamGroup& operator[](std::size_t i) const { return groups_[i]; }
  std::vector<ParamGroup>& groups() noexcept { return groups_; }
  const std::vector<ParamGroup>& groups() const noexcept { return groups_; }

  // Index of the named group; throws a validation error when absent.
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  void zero_grads();
  bool grads_all_zero() const;
  std::size_t num_values() const;

  // FNV-1a over names, shapes and value bytes; used to assert immutability.
  std::uint64_t checksum() const;

 private:
  std::vector<ParamGroup> groups_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradient scratch parallel to a ParamSet. Groups flagged as row-sparse (the
// embedding tables) track touched rows so merging and clearing stay cheap.
class GradBuffer {
 public:
  GradBuffer() = default;
  GradBuffer(const ParamSet& params, const std::vector<std::size_t>& row_sparse_groups);

  std::span<double> dense(std::size_t group) { return grads_[group].data(); }
  // Row `row` of a matrix group, marking it touched when the group is row-sparse.
  std::span<double> row(std::size_t group, std::size_t row);

  const Tensor& grad(std::size_t group) const { return grads_[group]; }
  std::size_t size() const noexcept { return grads_.size(); }

  bool all_finite() const;
  // params[g].grad += this[g] for every group, then clears this buffer.
  void merge_into(ParamSet& params);
  void clear();

 private:
  std::vector<Tensor> grads_;
  std::vector<bool> row_sparse_;
  std::vector<std::vector<std::uint32_t>> touched_;
  std::vector<std::vector<char>> touched_flag_;
};

}  // namespace moemeta
