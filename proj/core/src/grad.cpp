#include "avopt/grad.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <unordered_set>

#include "json.hpp"

namespace avopt {

Eigen::Index ParamRegistry::add(const std::string& name, Eigen::Index size) {
  if (name.empty()) throw ValidationError("ParamRegistry: empty block name");
  if (size <= 0) throw ValidationError("ParamRegistry: block '" + name + "' has size <= 0");
  if (has(name)) throw ValidationError("ParamRegistry: duplicate block '" + name + "'");
  const Eigen::Index offset = total_;
  blocks_.push_back({name, offset, size});
  total_ += size;
  return offset;
}

bool ParamRegistry::has(const std::string& name) const {
  for (const ParamBlock& b : blocks_)
    if (b.name == name) return true;
  return false;
}

const ParamBlock& ParamRegistry::find(const std::string& name) const {
  for (const ParamBlock& b : blocks_)
    if (b.name == name) return b;
  throw ValidationError("ParamRegistry: unknown block '" + name + "'");
}

double eval_with_grad(const DiffObjective& f, const VecX& params, VecX& grad) {
  const double value = f.eval(params, &grad);
  if (!is_finite(value)) throw NumericalError("objective value is non-finite");
  if (!all_finite(grad)) throw NumericalError("objective gradient is non-finite");
  return value;
}

double GradReport::max_rel_error() const {
  double m = 0.0;
  for (const BlockCheck& b : blocks) m = std::max(m, b.max_rel_error);
  return m;
}

std::string GradReport::to_json() const {
  nlohmann::json j;
  j["h"] = h;
  j["max_rel_error"] = max_rel_error();
  j["blocks"] = nlohmann::json::array();
  for (const BlockCheck& b : blocks) {
    j["blocks"].push_back({{"name", b.name},
                           {"checked", b.checked},
                           {"max_rel_error", b.max_rel_error},
                           {"worst_index", b.worst_index},
                           {"analytic", b.analytic},
                           {"fd", b.fd}});
  }
  return j.dump(2);
}

GradReport fd_check(const DiffObjective& f, const ParamRegistry& registry, const VecX& params,
                    const std::vector<std::string>& block_filter, double h, uint64_t seed,
                    Eigen::Index coords_per_block) {
  if (h <= 0.0) throw ValidationError("fd_check: h must be positive");
  if (params.size() != registry.total_size())
    throw ValidationError("fd_check: params size does not match registry");
  for (const std::string& name : block_filter) registry.find(name);

  VecX analytic;
  eval_with_grad(f, params, analytic);
  if (analytic.size() != params.size())
    throw ValidationError("fd_check: gradient size does not match params");

  GradReport report;
  report.h = h;
  VecX probe = params;
  for (const ParamBlock& block : registry.blocks()) {
    if (!block_filter.empty() &&
        std::find(block_filter.begin(), block_filter.end(), block.name) == block_filter.end())
      continue;

    std::vector<Eigen::Index> coords;
    if (block.size <= coords_per_block) {
      coords.resize(block.size);
      for (Eigen::Index i = 0; i < block.size; ++i) coords[i] = i;
    } else {
      Rng rng(mix_seed(seed, hash_tag(block.name)));
      std::unordered_set<Eigen::Index> seen;
      while (static_cast<Eigen::Index>(coords.size()) < coords_per_block) {
        const auto k = static_cast<Eigen::Index>(rng.uniform_index(block.size));
        if (seen.insert(k).second) coords.push_back(k);
      }
    }

    BlockCheck check;
    check.name = block.name;
    check.checked = static_cast<Eigen::Index>(coords.size());
    for (const Eigen::Index local : coords) {
      const Eigen::Index k = block.offset + local;
      const double saved = probe[k];
      probe[k] = saved + h;
      const double fp = f.eval(probe, nullptr);
      probe[k] = saved - h;
      const double fm = f.eval(probe, nullptr);
      probe[k] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[k];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
      const double rel = std::abs(a - fd) / denom;
      if (rel >= check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = k;
        check.analytic = a;
        check.fd = fd;
      }
    }
    report.blocks.push_back(check);
  }
  return report;
}

double parallel_accumulate(Eigen::Index n_items, int n_threads, Eigen::Index grad_size,
                           const std::function<void(Eigen::Index, double&, VecX&)>& item_fn,
                           VecX& grad_out) {
  if (n_items < 0) throw ValidationError("parallel_accumulate: negative item count");
  const int chunks =
      static_cast<int>(std::min<Eigen::Index>(std::max(1, n_threads), std::max<Eigen::Index>(n_items, 1)));
  std::vector<double> values(chunks, 0.0);
  std::vector<VecX> grads(chunks, VecX::Zero(grad_size));
  std::vector<std::exception_ptr> errors(chunks);

  const auto run_chunk = [&](int c) {
    const Eigen::Index lo = n_items * c / chunks;
    const Eigen::Index hi = n_items * (c + 1) / chunks;
    try {
      for (Eigen::Index i = lo; i < hi; ++i) item_fn(i, values[c], grads[c]);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };

  if (chunks == 1) {
    run_chunk(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (int c = 0; c < chunks; ++c) pool.emplace_back(run_chunk, c);
    for (auto& t : pool) t.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  grad_out = VecX::Zero(grad_size);
  double total = 0.0;
  for (int c = 0; c < chunks; ++c) {
    total += values[c];
    grad_out += grads[c];
  }
  return total;
}

}  // namespace avopt
