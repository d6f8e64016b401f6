#pragma once

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asen/model.hpp"
#include "asen/rng.hpp"

namespace asen::test {

inline Tensor random_tensor(Shape shape, Rng& rng, Real lo = -1.0, Real hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = rng.uniform(lo, hi);
  return t;
}

inline BackboneConfig precomputed_backbone(std::size_t c, std::size_t spatial) {
  BackboneConfig b;
  b.kind = BackboneKind::precomputed;
  b.out_channels = c;
  b.precomputed_spatial = spatial;
  return b;
}

inline void set_param(AsenModel& model, const std::string& name, std::vector<Real> values) {
  Parameter& p = model.parameters().at(name);
  p.value = Tensor(p.value.shape(), std::move(values));
}

// c = 2, c' = 2, h = w = 2, n = 2, r = 1, d = 2 with hand-picked weights.
inline AsenModel pencil_model(Variant variant = Variant::full) {
  AsenConfig cfg;
  cfg.c = 2;
  cfg.c_prime = 2;
  cfg.r = 1;
  cfg.d_embed = 2;
  cfg.n = 2;
  cfg.variant = variant;
  AsenModel model(cfg, precomputed_backbone(2, 2), 0);
  auto& ps = model.parameters();
  if (ps.find("asa.conv_p")) {
    set_param(model, "asa.conv_p", {0.4, -0.3, 0.2, 0.6});
    set_param(model, "asa.attr_embed", {0.7, -0.2, 0.1, 0.9});
    set_param(model, "asa.conv_s", {1.2, -0.8});
  }
  if (ps.find("aca.attr_embed")) {
    set_param(model, "aca.attr_embed", {0.5, -0.4, -0.3, 0.8});
    set_param(model, "aca.fc_reduce", {0.3, -0.1, 0.2, 0.4, -0.5, 0.6, 0.1, -0.2});
    set_param(model, "aca.fc_expand", {0.7, -0.6, 0.25, 0.9});
  }
  set_param(model, "proj.weight", {1.0, 0.5, -0.5, 2.0});
  set_param(model, "proj.bias", {0.1, -0.2});
  return model;
}

inline Tensor pencil_map_i() {
  return Tensor(Shape{2, 2, 2}, {0.5, -1.0, 2.0, 0.25, 1.5, 0.0, -0.5, 1.0});
}
inline Tensor pencil_map_j() {
  return Tensor(Shape{2, 2, 2}, {0.1, 0.3, -0.2, 0.9, 0.4, -0.7, 0.6, 0.2});
}
inline Tensor pencil_map_k() {
  return Tensor(Shape{2, 2, 2}, {-0.3, 0.8, 0.5, -0.6, 0.2, 0.2, 1.1, -0.4});
}

// Values from an independent direct evaluation of the chain, attribute 0 and 1.
struct PencilExpect {
  std::vector<Real> alpha_s, attended, alpha_c, gated, embedding;
};

inline const PencilExpect& pencil_expect(std::size_t attribute) {
  static const PencilExpect e0{
      {0.1968747319697506, 0.1929401857601307, 0.4037497167076897, 0.20643536556242886},
      {0.7646054550307313, 0.2998726051632099},
      {0.5734666178233775, 0.5264047957969021},
      {0.43847570426577803, 0.15785437748602457},
      {0.6174028930087903, -0.10352909716083988}};
  static const PencilExpect e1{
      {0.2004986798606947, 0.3515964948777575, 0.22904008627985625, 0.2188647389816916},
      {0.2614492023577252, 0.40509271563280547},
      {0.4598250499893192, 0.6025725020417875},
      {0.12022089254380862, 0.2440977312177619},
      {0.34226975815268956, 0.22808501616361948}};
  return attribute == 0 ? e0 : e1;
}

inline constexpr Real kPencilSim0 = 0.8646463723285966;
inline constexpr Real kPencilSim1 = 0.3394487974237658;
// Mean hinge loss of triplets (I,J,K|0), (J,I,K|1), (K,I,J|1) at margin 0.2.
inline constexpr Real kPencilBatchLoss = 0.335532971647545;

inline Real max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  Real m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace asen::test
