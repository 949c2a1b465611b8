#include "par/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace par::tensor {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.values.assign(shape_size(shape), 0.0);
  t.shape = std::move(shape);
  return t;
}

Tensor Tensor::of(Shape shape, std::vector<double> values) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.values = std::move(values);
  return t;
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t = zeros(std::move(shape));
  for (double& v : t.values) v = rng.next_uniform(lo, hi);
  return t;
}

void Tensor::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

void Tensor::zero_grad() {
  grad.assign(values.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Tape.

void Tape::check_index(Val v) const {
  if (!v.valid() || v.idx >= nodes_.size()) {
    throw ContractViolation("invalid tape value handle");
  }
}

Val Tape::push(Shape shape, std::vector<double> values) {
  Node node;
  node.grad.assign(values.size(), 0.0);
  node.shape = std::move(shape);
  node.owned = std::move(values);
  nodes_.push_back(std::move(node));
  return Val{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Val Tape::leaf(const Tensor& param) {
  Node node;
  node.shape = param.shape;
  node.external = &param.values;
  node.grad.assign(param.values.size(), 0.0);
  nodes_.push_back(std::move(node));
  return Val{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Val Tape::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape_size(shape)) {
    throw DimensionError("constant of shape " + shape_str(shape) +
                         " given " + std::to_string(values.size()) + " values");
  }
  return push(std::move(shape), std::move(values));
}

Val Tape::zeros(Shape shape) {
  std::vector<double> values(shape_size(shape), 0.0);
  return push(std::move(shape), std::move(values));
}

std::span<const double> Tape::values(Val v) const {
  check_index(v);
  const auto& data = vals(v.idx);
  return {data.data(), data.size()};
}

std::span<const double> Tape::grad(Val v) const {
  check_index(v);
  return {nodes_[v.idx].grad.data(), nodes_[v.idx].grad.size()};
}

const Shape& Tape::shape(Val v) const {
  check_index(v);
  return nodes_[v.idx].shape;
}

Val Tape::linear(Val w, Val x, std::optional<Val> b) {
  check_index(w);
  check_index(x);
  const Shape& ws = shape(w);
  const Shape& xs = shape(x);
  if (ws.size() != 2 || xs.size() != 1 || ws[1] != xs[0]) {
    throw DimensionError("linear: W " + shape_str(ws) + " does not apply to x " +
                         shape_str(xs));
  }
  const std::size_t m = ws[0];
  const std::size_t n = ws[1];
  if (b) {
    check_index(*b);
    const Shape& bs = shape(*b);
    if (bs.size() != 1 || bs[0] != m) {
      throw DimensionError("linear: bias " + shape_str(bs) +
                           " does not match output " + shape_str({m}));
    }
  }

  const auto& wv = vals(w.idx);
  const auto& xv = vals(x.idx);
  std::vector<double> y(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* row = wv.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) acc += row[j] * xv[j];
    y[i] = acc;
  }
  if (b) {
    const auto& bv = vals(b->idx);
    for (std::size_t i = 0; i < m; ++i) y[i] += bv[i];
  }

  Val out = push({m}, std::move(y));
  const std::uint32_t wi = w.idx, xi = x.idx, oi = out.idx;
  const std::int64_t bi = b ? static_cast<std::int64_t>(b->idx) : -1;
  nodes_[oi].back = [wi, xi, bi, oi, m, n](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& wv = t.vals(wi);
    const auto& xv = t.vals(xi);
    auto& wg = t.grads(wi);
    auto& xg = t.grads(xi);
    for (std::size_t i = 0; i < m; ++i) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      const double* row = wv.data() + i * n;
      double* wrow = wg.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        wrow[j] += gi * xv[j];
        xg[j] += gi * row[j];
      }
    }
    if (bi >= 0) {
      auto& bg = t.grads(static_cast<std::uint32_t>(bi));
      for (std::size_t i = 0; i < m; ++i) bg[i] += g[i];
    }
  };
  return out;
}

namespace {

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

}  // namespace

Val Tape::add(Val a, Val b) {
  check_index(a);
  check_index(b);
  check_same_shape(shape(a), shape(b), "add");
  const auto& av = vals(a.idx);
  const auto& bv = vals(b.idx);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  Val out = push(shape(a), std::move(y));
  const std::uint32_t ai = a.idx, bi = b.idx, oi = out.idx;
  nodes_[oi].back = [ai, bi, oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& ag = t.grads(ai);
    auto& bg = t.grads(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ag[i] += g[i];
      bg[i] += g[i];
    }
  };
  return out;
}

Val Tape::sub(Val a, Val b) {
  check_index(a);
  check_index(b);
  check_same_shape(shape(a), shape(b), "sub");
  const auto& av = vals(a.idx);
  const auto& bv = vals(b.idx);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  Val out = push(shape(a), std::move(y));
  const std::uint32_t ai = a.idx, bi = b.idx, oi = out.idx;
  nodes_[oi].back = [ai, bi, oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& ag = t.grads(ai);
    auto& bg = t.grads(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ag[i] += g[i];
      bg[i] -= g[i];
    }
  };
  return out;
}

Val Tape::hadamard(Val a, Val b) {
  check_index(a);
  check_index(b);
  check_same_shape(shape(a), shape(b), "hadamard");
  const auto& av = vals(a.idx);
  const auto& bv = vals(b.idx);
  std::vector<double> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  Val out = push(shape(a), std::move(y));
  const std::uint32_t ai = a.idx, bi = b.idx, oi = out.idx;
  nodes_[oi].back = [ai, bi, oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& av = t.vals(ai);
    const auto& bv = t.vals(bi);
    auto& ag = t.grads(ai);
    auto& bg = t.grads(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ag[i] += g[i] * bv[i];
      bg[i] += g[i] * av[i];
    }
  };
  return out;
}

Val Tape::scale(Val x, double c) {
  check_index(x);
  const auto& xv = vals(x.idx);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * xv[i];
  Val out = push(shape(x), std::move(y));
  const std::uint32_t xi = x.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi, c](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& xg = t.grads(xi);
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += c * g[i];
  };
  return out;
}

Val Tape::concat(Val a, Val b) {
  check_index(a);
  check_index(b);
  const Shape& as = shape(a);
  const Shape& bs = shape(b);
  if (as.size() != 1 || bs.size() != 1) {
    throw DimensionError("concat: expects vectors, got " + shape_str(as) +
                         " and " + shape_str(bs));
  }
  const auto& av = vals(a.idx);
  const auto& bv = vals(b.idx);
  const std::size_t na = av.size();
  const std::size_t nb = bv.size();
  std::vector<double> y;
  y.reserve(na + nb);
  y.insert(y.end(), av.begin(), av.end());
  y.insert(y.end(), bv.begin(), bv.end());
  Val out = push({na + nb}, std::move(y));
  const std::uint32_t ai = a.idx, bi = b.idx, oi = out.idx;
  nodes_[oi].back = [ai, bi, oi, na](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& ag = t.grads(ai);
    auto& bg = t.grads(bi);
    for (std::size_t i = 0; i < na; ++i) ag[i] += g[i];
    for (std::size_t i = na; i < g.size(); ++i) bg[i - na] += g[i];
  };
  return out;
}

Val Tape::tanh_op(Val x) {
  check_index(x);
  const auto& xv = vals(x.idx);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(xv[i]);
  Val out = push(shape(x), std::move(y));
  const std::uint32_t xi = x.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& y = t.vals(oi);
    auto& xg = t.grads(xi);
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * (1.0 - y[i] * y[i]);
  };
  return out;
}

Val Tape::sigmoid_op(Val x) {
  check_index(x);
  const auto& xv = vals(x.idx);
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  Val out = push(shape(x), std::move(y));
  const std::uint32_t xi = x.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& y = t.vals(oi);
    auto& xg = t.grads(xi);
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * y[i] * (1.0 - y[i]);
  };
  return out;
}

Val Tape::dot(Val a, Val b) {
  check_index(a);
  check_index(b);
  check_same_shape(shape(a), shape(b), "dot");
  const auto& av = vals(a.idx);
  const auto& bv = vals(b.idx);
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  Val out = push({1}, {acc});
  const std::uint32_t ai = a.idx, bi = b.idx, oi = out.idx;
  nodes_[oi].back = [ai, bi, oi](Tape& t) {
    const double g = t.nodes_[oi].grad[0];
    if (g == 0.0) return;
    const auto& av = t.vals(ai);
    const auto& bv = t.vals(bi);
    auto& ag = t.grads(ai);
    auto& bg = t.grads(bi);
    for (std::size_t i = 0; i < av.size(); ++i) {
      ag[i] += g * bv[i];
      bg[i] += g * av[i];
    }
  };
  return out;
}

Val Tape::row(Val matrix, std::size_t r) {
  check_index(matrix);
  const Shape& ms = shape(matrix);
  if (ms.size() != 2) {
    throw DimensionError("row: expects a matrix, got " + shape_str(ms));
  }
  if (r >= ms[0]) {
    throw DimensionError("row: index " + std::to_string(r) + " out of " +
                         std::to_string(ms[0]));
  }
  const std::size_t cols = ms[1];
  const auto& mv = vals(matrix.idx);
  std::vector<double> y(mv.begin() + static_cast<std::ptrdiff_t>(r * cols),
                        mv.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
  Val out = push({cols}, std::move(y));
  const std::uint32_t mi = matrix.idx, oi = out.idx;
  nodes_[oi].back = [mi, oi, r, cols](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& mg = t.grads(mi);
    double* dst = mg.data() + r * cols;
    for (std::size_t i = 0; i < cols; ++i) dst[i] += g[i];
  };
  return out;
}

Val Tape::stack(std::span<const Val> scalars) {
  std::vector<double> y(scalars.size());
  std::vector<std::uint32_t> ids(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    check_index(scalars[i]);
    if (shape(scalars[i]) != Shape{1}) {
      throw DimensionError("stack: element " + std::to_string(i) +
                           " is not a scalar");
    }
    y[i] = vals(scalars[i].idx)[0];
    ids[i] = scalars[i].idx;
  }
  Val out = push({scalars.size()}, std::move(y));
  const std::uint32_t oi = out.idx;
  nodes_[oi].back = [ids = std::move(ids), oi](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    for (std::size_t i = 0; i < ids.size(); ++i) t.grads(ids[i])[0] += g[i];
  };
  return out;
}

Val Tape::masked_softmax(Val scores, std::vector<bool> mask) {
  check_index(scores);
  const Shape& ss = shape(scores);
  if (ss.size() != 1 || ss[0] != mask.size()) {
    throw DimensionError("masked_softmax: scores " + shape_str(ss) +
                         " vs mask of size " + std::to_string(mask.size()));
  }
  const auto& sv = vals(scores.idx);
  double max_score = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (mask[i]) {
      any = true;
      max_score = std::max(max_score, sv[i]);
    }
  }
  if (!any) throw ContractViolation("masked_softmax: all-false mask");

  std::vector<double> y(sv.size(), 0.0);
  double z = 0.0;
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (mask[i]) {
      y[i] = std::exp(sv[i] - max_score);
      z += y[i];
    }
  }
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (mask[i]) y[i] /= z;
  }

  Val out = push(ss, std::move(y));
  const std::uint32_t si = scores.idx, oi = out.idx;
  nodes_[oi].back = [si, oi, mask = std::move(mask)](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& y = t.vals(oi);
    auto& sg = t.grads(si);
    double inner = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i]) inner += g[i] * y[i];
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (mask[i]) sg[i] += y[i] * (g[i] - inner);
    }
  };
  return out;
}

Val Tape::weighted_sum(Val weights, std::span<const Val> vectors) {
  check_index(weights);
  const Shape& ws = shape(weights);
  if (ws.size() != 1 || ws[0] != vectors.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(vectors.size()) +
                         " vectors vs weights " + shape_str(ws));
  }
  if (vectors.empty()) {
    throw ContractViolation("weighted_sum: no vectors");
  }
  std::vector<std::uint32_t> ids(vectors.size());
  const std::size_t dim = shape(vectors[0])[0];
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    check_index(vectors[i]);
    if (shape(vectors[i]) != Shape{dim}) {
      throw DimensionError("weighted_sum: inconsistent vector shapes");
    }
    ids[i] = vectors[i].idx;
  }
  const auto& wv = vals(weights.idx);
  std::vector<double> y(dim, 0.0);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto& v = vals(ids[t]);
    const double w = wv[t];
    for (std::size_t j = 0; j < dim; ++j) y[j] += w * v[j];
  }
  Val out = push({dim}, std::move(y));
  const std::uint32_t wi = weights.idx, oi = out.idx;
  nodes_[oi].back = [wi, oi, dim, ids = std::move(ids)](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    const auto& wv = t.vals(wi);
    auto& wg = t.grads(wi);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const auto& v = t.vals(ids[k]);
      auto& vg = t.grads(ids[k]);
      double acc = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        acc += g[j] * v[j];
        vg[j] += wv[k] * g[j];
      }
      wg[k] += acc;
    }
  };
  return out;
}

Val Tape::max_at(Val x, std::span<const std::size_t> positions) {
  check_index(x);
  if (positions.empty()) {
    throw ContractViolation("max_at: empty position set");
  }
  const auto& xv = vals(x.idx);
  std::size_t best = positions[0];
  for (std::size_t p : positions) {
    if (p >= xv.size()) {
      throw DimensionError("max_at: position " + std::to_string(p) +
                           " out of " + std::to_string(xv.size()));
    }
    if (xv[p] > xv[best] || (xv[p] == xv[best] && p < best)) best = p;
  }
  Val out = push({1}, {xv[best]});
  const std::uint32_t xi = x.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi, best](Tape& t) {
    t.grads(xi)[best] += t.nodes_[oi].grad[0];
  };
  return out;
}

Val Tape::neg_log(Val scalar) {
  check_index(scalar);
  if (shape(scalar) != Shape{1}) {
    throw DimensionError("neg_log: expects a scalar");
  }
  const double x = vals(scalar.idx)[0];
  Val out = push({1}, {-std::log(x)});
  const std::uint32_t xi = scalar.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi](Tape& t) {
    const double x = t.vals(xi)[0];
    t.grads(xi)[0] += -t.nodes_[oi].grad[0] / x;
  };
  return out;
}

Val Tape::kl_uniform(Val probs, std::span<const std::size_t> positions) {
  check_index(probs);
  if (positions.empty()) {
    throw ContractViolation("kl_uniform: empty position set");
  }
  const auto& av = vals(probs.idx);
  const double k = static_cast<double>(positions.size());
  const double target = 1.0 / k;
  double kl = 0.0;
  for (std::size_t p : positions) {
    if (p >= av.size()) {
      throw DimensionError("kl_uniform: position out of range");
    }
    kl += target * (std::log(target) - std::log(av[p]));
  }
  Val out = push({1}, {kl});
  const std::uint32_t ai = probs.idx, oi = out.idx;
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  nodes_[oi].back = [ai, oi, target, pos = std::move(pos)](Tape& t) {
    const double g = t.nodes_[oi].grad[0];
    if (g == 0.0) return;
    const auto& av = t.vals(ai);
    auto& ag = t.grads(ai);
    for (std::size_t p : pos) ag[p] += -g * target / av[p];
  };
  return out;
}

Val Tape::kl_reverse_renorm(Val probs, std::span<const std::size_t> positions) {
  check_index(probs);
  if (positions.empty()) {
    throw ContractViolation("kl_reverse_renorm: empty position set");
  }
  const auto& av = vals(probs.idx);
  const double k = static_cast<double>(positions.size());
  double total = 0.0;
  for (std::size_t p : positions) {
    if (p >= av.size()) {
      throw DimensionError("kl_reverse_renorm: position out of range");
    }
    total += av[p];
  }
  // KL(a_hat || uniform) with a_hat = a restricted to the support and
  // renormalized; d/da_j = (log(k * a_hat_j) - kl) / total.
  double kl = 0.0;
  for (std::size_t p : positions) {
    const double ph = av[p] / total;
    kl += ph * std::log(k * ph);
  }
  Val out = push({1}, {kl});
  const std::uint32_t ai = probs.idx, oi = out.idx;
  std::vector<std::size_t> pos(positions.begin(), positions.end());
  nodes_[oi].back = [ai, oi, k, total, kl, pos = std::move(pos)](Tape& t) {
    const double g = t.nodes_[oi].grad[0];
    if (g == 0.0) return;
    const auto& av = t.vals(ai);
    auto& ag = t.grads(ai);
    for (std::size_t p : pos) {
      const double ph = av[p] / total;
      ag[p] += g * (std::log(k * ph) - kl) / total;
    }
  };
  return out;
}

Val Tape::dropout(Val x, double rate, Rng& rng) {
  check_index(x);
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractViolation("dropout: rate must be in [0, 1)");
  }
  const auto& xv = vals(x.idx);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mult(xv.size());
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    mult[i] = rng.next_double() < rate ? 0.0 : keep_scale;
    y[i] = xv[i] * mult[i];
  }
  Val out = push(shape(x), std::move(y));
  const std::uint32_t xi = x.idx, oi = out.idx;
  nodes_[oi].back = [xi, oi, mult = std::move(mult)](Tape& t) {
    const auto& g = t.nodes_[oi].grad;
    auto& xg = t.grads(xi);
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * mult[i];
  };
  return out;
}

void Tape::backward(Val root) {
  check_index(root);
  if (shape(root) != Shape{1}) {
    throw ContractViolation("backward: root must be a scalar");
  }
  nodes_[root.idx].grad[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].back) nodes_[i].back(*this);
  }
}

// ---------------------------------------------------------------------------
// GRU cell.

GruCellParams GruCellParams::init(std::size_t input_dim, std::size_t hidden_dim,
                                  Rng& rng, double range) {
  GruCellParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  const Shape w_shape{hidden_dim, input_dim + hidden_dim};
  p.w_update = Tensor::uniform(w_shape, rng, -range, range);
  p.b_update = Tensor::zeros({hidden_dim});
  p.w_reset = Tensor::uniform(w_shape, rng, -range, range);
  p.b_reset = Tensor::zeros({hidden_dim});
  p.w_cand = Tensor::uniform(w_shape, rng, -range, range);
  p.b_cand = Tensor::zeros({hidden_dim});
  return p;
}

std::vector<NamedTensor> GruCellParams::named(const std::string& prefix) {
  return {
      {prefix + ".w_update", &w_update}, {prefix + ".b_update", &b_update},
      {prefix + ".w_reset", &w_reset},   {prefix + ".b_reset", &b_reset},
      {prefix + ".w_cand", &w_cand},     {prefix + ".b_cand", &b_cand},
  };
}

GruLeaves gru_leaves(Tape& tape, const GruCellParams& params) {
  GruLeaves leaves;
  leaves.w_update = tape.leaf(params.w_update);
  leaves.b_update = tape.leaf(params.b_update);
  leaves.w_reset = tape.leaf(params.w_reset);
  leaves.b_reset = tape.leaf(params.b_reset);
  leaves.w_cand = tape.leaf(params.w_cand);
  leaves.b_cand = tape.leaf(params.b_cand);
  return leaves;
}

Val gru_cell(Tape& tape, const GruLeaves& cell, Val x, Val h_prev) {
  const Val xh = tape.concat(x, h_prev);
  const Val z = tape.sigmoid_op(tape.linear(cell.w_update, xh, cell.b_update));
  const Val r = tape.sigmoid_op(tape.linear(cell.w_reset, xh, cell.b_reset));
  const Val xrh = tape.concat(x, tape.hadamard(r, h_prev));
  const Val cand = tape.tanh_op(tape.linear(cell.w_cand, xrh, cell.b_cand));
  // h' = (1-z)*h + z*cand, as h + z*(cand - h).
  return tape.add(h_prev, tape.hadamard(z, tape.sub(cand, h_prev)));
}

// ---------------------------------------------------------------------------
// Finite differences.

FiniteDiffReport finite_diff_check(const std::function<double()>& loss,
                                   std::span<const NamedTensor> params,
                                   const FiniteDiffOptions& options) {
  FiniteDiffReport report;
  Rng rng(options.subsample_seed);
  for (const NamedTensor& named : params) {
    Tensor& t = *named.tensor;
    if (!t.has_grad()) t.ensure_grad();

    std::vector<std::size_t> coords;
    if (options.max_coords_per_tensor == 0 ||
        t.size() <= options.max_coords_per_tensor) {
      coords.resize(t.size());
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      std::vector<std::size_t> all(t.size());
      std::iota(all.begin(), all.end(), 0);
      rng.shuffle(all);
      coords.assign(all.begin(),
                    all.begin() + static_cast<std::ptrdiff_t>(
                                      options.max_coords_per_tensor));
      std::sort(coords.begin(), coords.end());
    }

    for (std::size_t c : coords) {
      const double saved = t.values[c];
      t.values[c] = saved + options.epsilon;
      const double up = loss();
      t.values[c] = saved - options.epsilon;
      const double down = loss();
      t.values[c] = saved;

      const double numeric = (up - down) / (2.0 * options.epsilon);
      const double analytic = t.grad[c];
      const double rel = std::abs(analytic - numeric) /
                         std::max(1.0, std::abs(analytic));
      ++report.coords_checked;
      if (!(rel <= options.tolerance)) {
        report.violations.push_back(
            FiniteDiffViolation{named.name, c, analytic, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace par::tensor
