#include "moemeta/params.hpp"

#include <algorithm>
#include <cstring>

#include "moemeta/error.hpp"

namespace moemeta {

std::size_t ParamSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) fail(ErrorKind::kConfig, "duplicate parameter group " + name);
  ParamGroup group;
  group.name = std::move(name);
  group.grad = Tensor::with_shape(value.shape());
  group.value = std::move(value);
  group.trainable = trainable;
  index_.emplace(group.name, groups_.size());
  groups_.push_back(std::move(group));
  return groups_.size() - 1;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) fail(ErrorKind::kValidation, "unknown parameter group " + name);
  return it->second;
}

void ParamSet::zero_grads() {
  for (auto& g : groups_) g.grad.set_zero();
}

bool ParamSet::grads_all_zero() const {
  for (const auto& g : groups_) {
    for (double v : g.grad.data()) {
      if (v != 0.0) return false;
    }
  }
  return true;
}

std::size_t ParamSet::num_values() const {
  std::size_t n = 0;
  for (const auto& g : groups_) n += g.value.size();
  return n;
}

std::uint64_t ParamSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& g : groups_) {
    feed(g.name.data(), g.name.size());
    for (std::size_t d : g.value.shape()) feed(&d, sizeof d);
    feed(g.value.data().data(), g.value.size() * sizeof(double));
  }
  return h;
}

GradBuffer::GradBuffer(const ParamSet& params, const std::vector<std::size_t>& row_sparse_groups)
    : row_sparse_(params.size(), false), touched_(params.size()), touched_flag_(params.size()) {
  grads_.reserve(params.size());
  for (const auto& g : params.groups()) grads_.push_back(Tensor::with_shape(g.value.shape()));
  for (std::size_t gi : row_sparse_groups) {
    row_sparse_[gi] = true;
    touched_flag_[gi].assign(grads_[gi].rows(), 0);
  }
}

std::span<double> GradBuffer::row(std::size_t group, std::size_t r) {
  if (row_sparse_[group] && !touched_flag_[group][r]) {
    touched_flag_[group][r] = 1;
    touched_[group].push_back(static_cast<std::uint32_t>(r));
  }
  return grads_[group].row(r);
}

bool GradBuffer::all_finite() const {
  for (std::size_t gi = 0; gi < grads_.size(); ++gi) {
    if (row_sparse_[gi]) {
      for (std::uint32_t r : touched_[gi]) {
        if (!moemeta::all_finite(grads_[gi].row(r))) return false;
      }
    } else if (!grads_[gi].all_finite()) {
      return false;
    }
  }
  return true;
}

void GradBuffer::merge_into(ParamSet& params) {
  for (std::size_t gi = 0; gi < grads_.size(); ++gi) {
    Tensor& target = params[gi].grad;
    if (row_sparse_[gi]) {
      // Row order does not affect the result: each row is summed independently.
      for (std::uint32_t r : touched_[gi]) axpy(1.0, grads_[gi].row(r), target.row(r));
    } else {
      axpy(1.0, grads_[gi].data(), target.data());
    }
  }
  clear();
}

void GradBuffer::clear() {
  for (std::size_t gi = 0; gi < grads_.size(); ++gi) {
    if (row_sparse_[gi]) {
      for (std::uint32_t r : touched_[gi]) {
        auto row = grads_[gi].row(r);
        std::fill(row.begin(), row.end(), 0.0);
        touched_flag_[gi][r] = 0;
      }
      touched_[gi].clear();
    } else {
      grads_[gi].set_zero();
    }
  }
}

}  // namespace moemeta
