#include "moegrad/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace moegrad::ad {

namespace {

[[noreturn]] void shape_error(Primitive kind, std::span<const Var> inputs, const std::string& why) {
  std::string msg = std::string(primitive_name(kind)) + ": " + why + " (input shapes";
  for (const auto& v : inputs) msg += " " + shape_string(v.shape());
  throw std::invalid_argument(msg + ")");
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
  if (!slot) {
    slot = g;
    return;
  }
  auto dst = slot->values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor softmax_forward(const Tensor& x, const std::vector<bool>& mask, bool log_space) {
  const std::size_t n = last_dim(x);
  const std::size_t rows = x.size() / n;
  Tensor y = Tensor::zeros(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * n;
    double* out = y.values().data() + r * n;
    double mx = -HUGE_VAL;
    for (std::size_t i = 0; i < n; ++i)
      if (mask.empty() || mask[i]) mx = std::max(mx, in[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask.empty() || mask[i]) z += std::exp(in[i] - mx);
    if (log_space) {
      const double lz = std::log(z);
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] - mx - lz;
    } else {
      for (std::size_t i = 0; i < n; ++i)
        out[i] = (mask.empty() || mask[i]) ? std::exp(in[i] - mx) / z : 0.0;
    }
  }
  return y;
}

Tensor forward(Primitive kind, std::span<const Var> in, const PrimitiveArgs& args) {
  auto require_arity = [&](std::size_t n) {
    if (in.size() != n) shape_error(kind, in, "expected " + std::to_string(n) + " inputs");
  };
  switch (kind) {
    case Primitive::leaf:
      throw std::invalid_argument("leaf is not an applicable primitive");
    case Primitive::matmul: {
      require_arity(2);
      const Tensor& a = in[0].value();
      const Tensor& b = in[1].value();
      if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2) || a.shape()[1] != b.shape()[0])
        shape_error(kind, in, "inner dimensions do not conform");
      const std::size_t m = a.shape()[0], k = a.shape()[1];
      const std::size_t n = b.rank() == 2 ? b.shape()[1] : 1;
      Tensor c = b.rank() == 2 ? Tensor::zeros({m, n}) : Tensor::zeros({m});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = a[i * k + p];
          for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * b[p * n + j];
        }
      return c;
    }
    case Primitive::add:
    case Primitive::sub: {
      require_arity(2);
      if (in[0].shape() != in[1].shape()) shape_error(kind, in, "shapes differ");
      Tensor c = in[0].value();
      const double sign = kind == Primitive::add ? 1.0 : -1.0;
      for (std::size_t i = 0; i < c.size(); ++i) c[i] += sign * in[1].value()[i];
      return c;
    }
    case Primitive::elementwise_mul: {
      require_arity(2);
      const Tensor& a = in[0].value();
      const Tensor& b = in[1].value();
      if (a.shape() == b.shape()) {
        Tensor c = a;
        for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
        return c;
      }
      if (a.rank() == 0 || b.rank() == 0) {
        const double s = a.rank() == 0 ? a.item() : b.item();
        Tensor c = a.rank() == 0 ? b : a;
        for (auto& v : c.values()) v *= s;
        return c;
      }
      shape_error(kind, in, "shapes differ and neither operand is a scalar");
    }
    case Primitive::scale_by_constant: {
      require_arity(1);
      Tensor c = in[0].value();
      for (auto& v : c.values()) v *= args.factor;
      return c;
    }
    case Primitive::tanh:
    case Primitive::relu:
    case Primitive::exp:
    case Primitive::square: {
      require_arity(1);
      Tensor c = in[0].value();
      for (auto& v : c.values()) {
        switch (kind) {
          case Primitive::tanh: v = std::tanh(v); break;
          case Primitive::relu: v = v > 0.0 ? v : 0.0; break;
          case Primitive::exp: v = std::exp(v); break;
          default: v = v * v; break;
        }
      }
      return c;
    }
    case Primitive::log: {
      require_arity(1);
      Tensor c = in[0].value();
      for (auto& v : c.values()) {
        if (!(v > 0.0))
          throw std::domain_error("log: non-positive input " + std::to_string(v));
        v = std::log(v);
      }
      return c;
    }
    case Primitive::sum: {
      require_arity(1);
      double s = 0.0;
      for (double v : in[0].value().values()) s += v;
      return Tensor::scalar(s);
    }
    case Primitive::softmax_lastdim:
    case Primitive::log_softmax_lastdim: {
      require_arity(1);
      const Tensor& x = in[0].value();
      if (x.rank() == 0 || x.rank() > 2) shape_error(kind, in, "expected rank 1 or 2");
      if (!args.mask.empty()) {
        if (kind == Primitive::log_softmax_lastdim)
          shape_error(kind, in, "log_softmax does not take a mask");
        if (args.mask.size() != last_dim(x)) shape_error(kind, in, "mask length mismatch");
        if (std::none_of(args.mask.begin(), args.mask.end(), [](bool b) { return b; }))
          throw std::invalid_argument("softmax_lastdim: every entry is masked");
      }
      return softmax_forward(x, args.mask, kind == Primitive::log_softmax_lastdim);
    }
    case Primitive::select: {
      require_arity(1);
      const Tensor& x = in[0].value();
      if (x.rank() != 1 || args.index >= x.size()) shape_error(kind, in, "index out of range");
      return Tensor::scalar(x[args.index]);
    }
    case Primitive::select_row: {
      require_arity(1);
      const Tensor& x = in[0].value();
      if (x.rank() != 2 || args.index >= x.shape()[0]) shape_error(kind, in, "row out of range");
      const std::size_t n = x.shape()[1];
      auto first = x.values().begin() + static_cast<std::ptrdiff_t>(args.index * n);
      return Tensor::vector(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
    }
    case Primitive::concat: {
      if (in.empty()) shape_error(kind, in, "nothing to concatenate");
      std::vector<double> out;
      for (const auto& v : in) {
        if (v.value().rank() != 1) shape_error(kind, in, "concat takes rank-1 inputs");
        out.insert(out.end(), v.value().values().begin(), v.value().values().end());
      }
      return Tensor::vector(std::move(out));
    }
    case Primitive::stop_gradient:
    case Primitive::scale_gradient:
      require_arity(1);
      if (!std::isfinite(args.factor)) throw std::invalid_argument("scale_gradient: non-finite factor");
      return in[0].value();
  }
  throw std::logic_error("unhandled primitive");
}

}  // namespace

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::leaf: return "leaf";
    case Primitive::matmul: return "matmul";
    case Primitive::add: return "add";
    case Primitive::sub: return "sub";
    case Primitive::elementwise_mul: return "elementwise_mul";
    case Primitive::scale_by_constant: return "scale_by_constant";
    case Primitive::tanh: return "tanh";
    case Primitive::relu: return "relu";
    case Primitive::exp: return "exp";
    case Primitive::log: return "log";
    case Primitive::square: return "square";
    case Primitive::sum: return "sum";
    case Primitive::softmax_lastdim: return "softmax_lastdim";
    case Primitive::log_softmax_lastdim: return "log_softmax_lastdim";
    case Primitive::select: return "select";
    case Primitive::select_row: return "select_row";
    case Primitive::concat: return "concat";
    case Primitive::stop_gradient: return "stop_gradient";
    case Primitive::scale_gradient: return "scale_gradient";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor GradMap::of(const Var& leaf) const {
  const auto id = leaf.id();
  if (id < grads_.size() && grads_[id]) return *grads_[id];
  return Tensor::zeros(leaf.shape());
}

bool GradMap::reached(const Var& leaf) const {
  return leaf.id() < grads_.size() && grads_[leaf.id()].has_value();
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{Primitive::leaf, {}, std::move(value), {}, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::apply(Primitive kind, std::span<const Var> inputs, PrimitiveArgs args) {
  for (const auto& v : inputs)
    if (v.tape() != this) throw std::invalid_argument("input recorded on a different tape");
  Tensor out = forward(kind, inputs, args);
  bool rg = false;
  std::vector<NodeId> parents;
  parents.reserve(inputs.size());
  for (const auto& v : inputs) {
    parents.push_back(v.id());
    rg = rg || nodes_[v.id()].requires_grad;
  }
  if (kind == Primitive::stop_gradient) rg = false;
  nodes_.push_back(Node{kind, std::move(parents), std::move(out), std::move(args), rg});
  return Var(this, nodes_.size() - 1);
}

GradMap Tape::backward(const Var& loss) const {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss recorded on a different tape");
  if (loss.value().size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(loss.shape()));
  std::vector<std::optional<Tensor>> adj(loss.id() + 1);
  adj[loss.id()] = Tensor(loss.shape(), {1.0});
  for (NodeId k = loss.id() + 1; k-- > 0;) {
    if (!adj[k] || !nodes_[k].requires_grad) continue;
    if (nodes_[k].kind == Primitive::leaf) continue;
    backprop_node(nodes_[k], *adj[k], adj);
  }
  GradMap out;
  out.grads_.resize(adj.size());
  out.shapes_.resize(adj.size());
  for (NodeId k = 0; k < adj.size(); ++k) {
    if (nodes_[k].kind == Primitive::leaf && nodes_[k].requires_grad && adj[k])
      out.grads_[k] = std::move(adj[k]);
    out.shapes_[k] = nodes_[k].value.shape();
  }
  return out;
}

void Tape::backprop_node(const Node& node, const Tensor& g,
                         std::vector<std::optional<Tensor>>& adj) const {
  const auto& p = node.parents;
  auto live = [&](std::size_t i) { return nodes_[p[i]].requires_grad; };
  auto val = [&](std::size_t i) -> const Tensor& { return nodes_[p[i]].value; };

  switch (node.kind) {
    case Primitive::leaf:
    case Primitive::stop_gradient:
      return;
    case Primitive::matmul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1];
      const std::size_t n = b.rank() == 2 ? b.shape()[1] : 1;
      if (live(0)) {
        Tensor da = Tensor::zeros(a.shape());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t q = 0; q < k; ++q) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * b[q * n + j];
            da[i * k + q] = s;
          }
        accumulate(adj[p[0]], da);
      }
      if (live(1)) {
        Tensor db = Tensor::zeros(b.shape());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t q = 0; q < k; ++q) {
            const double aiq = a[i * k + q];
            for (std::size_t j = 0; j < n; ++j) db[q * n + j] += aiq * g[i * n + j];
          }
        accumulate(adj[p[1]], db);
      }
      return;
    }
    case Primitive::add:
      if (live(0)) accumulate(adj[p[0]], g);
      if (live(1)) accumulate(adj[p[1]], g);
      return;
    case Primitive::sub:
      if (live(0)) accumulate(adj[p[0]], g);
      if (live(1)) {
        Tensor neg = g;
        for (auto& v : neg.values()) v = -v;
        accumulate(adj[p[1]], neg);
      }
      return;
    case Primitive::elementwise_mul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (a.shape() == b.shape()) {
        for (std::size_t side = 0; side < 2; ++side) {
          if (!live(side)) continue;
          const Tensor& other = side == 0 ? b : a;
          Tensor d = g;
          for (std::size_t i = 0; i < d.size(); ++i) d[i] *= other[i];
          accumulate(adj[p[side]], d);
        }
        return;
      }
      const std::size_t s_idx = a.rank() == 0 ? 0 : 1;
      const std::size_t t_idx = 1 - s_idx;
      const double s = val(s_idx).item();
      const Tensor& t = val(t_idx);
      if (live(s_idx)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < t.size(); ++i) acc += g[i] * t[i];
        accumulate(adj[p[s_idx]], Tensor(val(s_idx).shape(), {acc}));
      }
      if (live(t_idx)) {
        Tensor d = g;
        for (auto& v : d.values()) v *= s;
        accumulate(adj[p[t_idx]], d);
      }
      return;
    }
    case Primitive::scale_by_constant:
    case Primitive::scale_gradient: {
      Tensor d = g;
      for (auto& v : d.values()) v *= node.args.factor;
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::tanh: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - node.value[i] * node.value[i];
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::relu: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = val(0)[i] > 0.0 ? d[i] : 0.0;
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::exp: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= node.value[i];
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::log: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] /= val(0)[i];
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::square: {
      Tensor d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 2.0 * val(0)[i];
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::sum: {
      accumulate(adj[p[0]], Tensor::filled(val(0).shape(), g.item()));
      return;
    }
    case Primitive::softmax_lastdim: {
      // dx = y * (g - <y, g>) per row; masked entries have y = 0 and receive nothing.
      const Tensor& y = node.value;
      const std::size_t n = last_dim(y);
      Tensor d = Tensor::zeros(y.shape());
      for (std::size_t r = 0; r < y.size() / n; ++r) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += y[r * n + i] * g[r * n + i];
        for (std::size_t i = 0; i < n; ++i) d[r * n + i] = y[r * n + i] * (g[r * n + i] - dot);
      }
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::log_softmax_lastdim: {
      const Tensor& y = node.value;
      const std::size_t n = last_dim(y);
      Tensor d = Tensor::zeros(y.shape());
      for (std::size_t r = 0; r < y.size() / n; ++r) {
        double gs = 0.0;
        for (std::size_t i = 0; i < n; ++i) gs += g[r * n + i];
        for (std::size_t i = 0; i < n; ++i)
          d[r * n + i] = g[r * n + i] - std::exp(y[r * n + i]) * gs;
      }
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::select: {
      Tensor d = Tensor::zeros(val(0).shape());
      d[node.args.index] = g.item();
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::select_row: {
      Tensor d = Tensor::zeros(val(0).shape());
      const std::size_t n = val(0).shape()[1];
      for (std::size_t j = 0; j < n; ++j) d[node.args.index * n + j] = g[j];
      accumulate(adj[p[0]], d);
      return;
    }
    case Primitive::concat: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const std::size_t n = val(i).size();
        if (live(i)) {
          auto first = g.values().begin() + static_cast<std::ptrdiff_t>(offset);
          accumulate(adj[p[i]],
                     Tensor::vector(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n))));
        }
        offset += n;
      }
      return;
    }
  }
}

Var apply_primitive(Primitive kind, std::span<const Var> inputs, PrimitiveArgs args) {
  if (inputs.empty() || inputs[0].tape() == nullptr)
    throw std::invalid_argument("apply_primitive: inputs must be recorded on a tape");
  return inputs[0].tape()->apply(kind, inputs, std::move(args));
}

namespace {
Var unary(Primitive k, const Var& a, PrimitiveArgs args = {}) {
  const Var in[] = {a};
  return apply_primitive(k, in, std::move(args));
}
Var binary(Primitive k, const Var& a, const Var& b) {
  const Var in[] = {a, b};
  return apply_primitive(k, in);
}
}  // namespace

Var matmul(const Var& a, const Var& b) { return binary(Primitive::matmul, a, b); }
Var add(const Var& a, const Var& b) { return binary(Primitive::add, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Primitive::sub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(Primitive::elementwise_mul, a, b); }
Var scale(const Var& a, double factor) {
  return unary(Primitive::scale_by_constant, a, {.factor = factor});
}
Var tanh(const Var& a) { return unary(Primitive::tanh, a); }
Var relu(const Var& a) { return unary(Primitive::relu, a); }
Var exp(const Var& a) { return unary(Primitive::exp, a); }
Var log(const Var& a) { return unary(Primitive::log, a); }
Var square(const Var& a) { return unary(Primitive::square, a); }
Var sum(const Var& a) { return unary(Primitive::sum, a); }
Var softmax(const Var& a) { return unary(Primitive::softmax_lastdim, a); }
Var masked_softmax(const Var& a, std::vector<bool> mask) {
  return unary(Primitive::softmax_lastdim, a, {.mask = std::move(mask)});
}
Var log_softmax(const Var& a) { return unary(Primitive::log_softmax_lastdim, a); }
Var select(const Var& a, std::size_t index) { return unary(Primitive::select, a, {.index = index}); }
Var select_row(const Var& a, std::size_t row) {
  return unary(Primitive::select_row, a, {.index = row});
}
Var concat(std::span<const Var> parts) { return apply_primitive(Primitive::concat, parts); }
Var stop_gradient(const Var& a) { return unary(Primitive::stop_gradient, a); }
Var scale_gradient(const Var& a, double factor) {
  return unary(Primitive::scale_gradient, a, {.factor = factor});
}

}  // namespace moegrad::ad
