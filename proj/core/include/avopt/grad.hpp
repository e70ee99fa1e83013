#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "avopt/common.hpp"
#include "avopt/rng.hpp"

// Differentiation contract shared by training and pose optimization: flat
// parameter vectors with named block slices, analytic objectives, a central
// finite-difference oracle, and deterministic parallel accumulation.

namespace avopt {

struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index size = 0;
};

// Blocks are appended contiguously, so slices are disjoint and cover the
// vector by construction.
class ParamRegistry {
 public:
  Eigen::Index add(const std::string& name, Eigen::Index size);
  Eigen::Index total_size() const { return total_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  bool has(const std::string& name) const;
  const ParamBlock& find(const std::string& name) const;

 private:
  std::vector<ParamBlock> blocks_;
  Eigen::Index total_ = 0;
};

struct ParamVector {
  std::shared_ptr<const ParamRegistry> registry;
  VecX values;

  explicit ParamVector(std::shared_ptr<const ParamRegistry> reg)
      : registry(std::move(reg)), values(VecX::Zero(registry->total_size())) {}

  Eigen::Ref<VecX> block(const std::string& name) {
    const ParamBlock& b = registry->find(name);
    return values.segment(b.offset, b.size);
  }
  Eigen::Ref<const VecX> block(const std::string& name) const {
    const ParamBlock& b = registry->find(name);
    return values.segment(b.offset, b.size);
  }
};

// Scalar objective of a flat parameter vector. eval returns the value; when
// grad is non-null it is resized and filled with the analytic gradient.
struct DiffObjective {
  std::function<double(const VecX& params, VecX* grad)> eval;
};

// Evaluates value and gradient, rejecting non-finite results.
double eval_with_grad(const DiffObjective& f, const VecX& params, VecX& grad);

struct BlockCheck {
  std::string name;
  Eigen::Index checked = 0;
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;  // index into the flat vector
  double analytic = 0.0;          // at the worst coordinate
  double fd = 0.0;
};

struct GradReport {
  double h = 0.0;
  std::vector<BlockCheck> blocks;

  double max_rel_error() const;
  std::string to_json() const;
};

// Central differences on a random coordinate subset of each (filtered)
// block, compared against the analytic gradient. Relative error uses
// |a - fd| / max(|a|, |fd|, 1e-6). Empty filter means every block.
GradReport fd_check(const DiffObjective& f, const ParamRegistry& registry, const VecX& params,
                    const std::vector<std::string>& block_filter, double h, uint64_t seed,
                    Eigen::Index coords_per_block = 64);

// Deterministic parallel sum of per-item (value, gradient) contributions:
// [0, n_items) splits into one contiguous chunk per thread, each chunk
// accumulates serially into its own buffer, and chunk buffers combine in
// chunk order. Bit-identical for a fixed thread count; across thread counts
// results agree to summation-order tolerance. Returns the summed value.
double parallel_accumulate(Eigen::Index n_items, int n_threads, Eigen::Index grad_size,
                           const std::function<void(Eigen::Index, double&, VecX&)>& item_fn,
                           VecX& grad_out);

}  // namespace avopt
