#include "moegrad/dataset.hpp"

#include <cmath>
#include <stdexcept>

#include "moegrad/rng.hpp"
#include "moegrad/routing.hpp"

namespace moegrad::harness {

namespace {

struct RegionMap {
  Tensor b_in;    // h x d
  Tensor bias;    // h
  Tensor a_out;   // d_out x h
  Tensor offset;  // d_out
};

constexpr std::size_t kMapHidden = 8;

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, stddev);
  return t;
}

RegionMap random_map(std::size_t d, std::size_t d_out, Rng& rng) {
  RegionMap m;
  m.b_in = gaussian({kMapHidden, d}, 1.5 / std::sqrt(static_cast<double>(d)), rng);
  m.bias = gaussian({kMapHidden}, 0.5, rng);
  m.a_out = gaussian({d_out, kMapHidden}, 1.0 / std::sqrt(static_cast<double>(kMapHidden)), rng);
  m.offset = gaussian({d_out}, 0.5, rng);
  return m;
}

std::vector<double> apply_map(const RegionMap& m, std::span<const double> x) {
  std::vector<double> h(kMapHidden);
  for (std::size_t i = 0; i < kMapHidden; ++i) {
    double s = m.bias[i];
    for (std::size_t k = 0; k < x.size(); ++k) s += m.b_in.at(i, k) * x[k];
    h[i] = std::tanh(s);
  }
  std::vector<double> y(m.offset.size());
  for (std::size_t o = 0; o < y.size(); ++o) {
    double s = m.offset[o];
    for (std::size_t i = 0; i < kMapHidden; ++i) s += m.a_out.at(o, i) * h[i];
    y[o] = s;
  }
  return y;
}

void fill_split(const TaskSpec& spec, const Tensor& centres, const std::vector<RegionMap>& maps,
                std::size_t n, Tensor& x, Tensor& y, Rng& rng) {
  const std::size_t d = centres.cols();
  const std::size_t d_out = maps.front().offset.size();
  x = Tensor::zeros({n, d});
  y = Tensor::zeros({n, d_out});
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.values().subspan(r * d, d);
    for (auto& v : row) v = rng.uniform(-1.0, 1.0);
    auto t = apply_map(maps[region_of(centres, row)], row);
    for (auto& v : t) v += spec.noise_std * rng.normal();
    if (spec.kind == moe::TaskKind::classification) {
      const auto cls = routing::argmax_index(t);
      for (std::size_t o = 0; o < d_out; ++o) y.at(r, o) = o == cls ? 1.0 : 0.0;
    } else {
      for (std::size_t o = 0; o < d_out; ++o) y.at(r, o) = t[o];
    }
  }
}

}  // namespace

std::size_t region_of(const Tensor& centres, std::span<const double> x) {
  std::size_t best = 0;
  double best_d = HUGE_VAL;
  for (std::size_t c = 0; c < centres.rows(); ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double diff = x[k] - centres.at(c, k);
      s += diff * diff;
    }
    if (s < best_d) {
      best_d = s;
      best = c;
    }
  }
  return best;
}

Dataset gen_synthetic(const TaskSpec& spec, std::size_t d_model, std::size_t num_regions,
                      std::size_t d_out, std::uint64_t seed) {
  if (spec.n_train == 0 || spec.n_eval == 0)
    throw std::invalid_argument("gen_synthetic: n_train and n_eval must be positive");
  if (num_regions == 0 || d_model == 0 || d_out == 0)
    throw std::invalid_argument("gen_synthetic: empty dimensions");
  Rng structure(seed, 0);
  Tensor centres = Tensor::zeros({num_regions, d_model});
  for (auto& v : centres.values()) v = structure.uniform(-1.0, 1.0);
  std::vector<RegionMap> maps;
  for (std::size_t k = 0; k < num_regions; ++k) maps.push_back(random_map(d_model, d_out, structure));

  Dataset ds;
  Rng train_rng(seed, 1), eval_rng(seed, 2);
  fill_split(spec, centres, maps, spec.n_train, ds.train_x, ds.train_y, train_rng);
  fill_split(spec, centres, maps, spec.n_eval, ds.eval_x, ds.eval_y, eval_rng);
  return ds;
}

}  // namespace moegrad::harness
