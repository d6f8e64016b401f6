#include "asen/model.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>

#include "asen/error.hpp"
#include "asen/ops.hpp"

namespace asen {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_asa: return "no_asa";
    case Variant::no_aca: return "no_aca";
    case Variant::csn: return "csn";
    case Variant::triplet_plain: return "triplet_plain";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::full, Variant::no_asa, Variant::no_aca, Variant::csn,
                    Variant::triplet_plain}) {
    if (to_string(v) == name) return v;
  }
  throw ContractError("unknown variant '" + std::string(name) + "'");
}

void AsenConfig::validate() const {
  if (n < 1) throw ContractError("attribute count must be >= 1");
  if (c < 1 || r < 1 || c / r < 1) throw ContractError("reduction rate leaves c/r < 1");
  if (d_embed < 2) throw ContractError("embedding dimension must be >= 2");
  if (c_prime < 1) throw ContractError("c' must be >= 1");
}

AsenModel::AsenModel(const AsenConfig& config, const BackboneConfig& backbone, std::uint64_t seed)
    : config_(config), backbone_config_(backbone) {
  config_.validate();
  backbone_config_.validate();
  if (backbone_config_.out_channels != config_.c) {
    throw DimensionError("backbone emits " + std::to_string(backbone_config_.out_channels) +
                         " channels, model expects c=" + std::to_string(config_.c));
  }
  if (backbone_config_.out_spatial() == 1) {
    std::cerr << "warning: 1x1 feature maps make spatial attention an identity pooling\n";
  }

  Rng rng(seed);
  if (backbone_config_.kind == BackboneKind::tiny_conv) {
    backbone_.emplace(backbone_config_, params_, rng);
  }

  const std::size_t c = config_.c, cp = config_.c_prime, n = config_.n;
  const std::size_t cr = config_.reduced(), d = config_.d_embed;
  const Variant v = config_.variant;
  if (v == Variant::full || v == Variant::no_aca) {
    conv_p_ = params_.add("asa.conv_p", glorot_uniform(Shape{cp, c}, c, cp, rng)).index;
    attr_embed_asa_ = params_.add("asa.attr_embed", glorot_uniform(Shape{cp, n}, n, cp, rng)).index;
    conv_s_ = params_.add("asa.conv_s", glorot_uniform(Shape{1, cp}, cp, 1, rng)).index;
    if (config_.attention_conv_bias) {
      conv_p_bias_ = params_.add("asa.conv_p_bias", Tensor(Shape{cp})).index;
      conv_s_bias_ = params_.add("asa.conv_s_bias", Tensor(Shape{1})).index;
    }
  }
  if (v == Variant::full || v == Variant::no_asa) {
    attr_embed_aca_ = params_.add("aca.attr_embed", glorot_uniform(Shape{c, n}, n, c, rng)).index;
    fc_reduce_ = params_.add("aca.fc_reduce", glorot_uniform(Shape{cr, 2 * c}, 2 * c, cr, rng)).index;
    fc_expand_ = params_.add("aca.fc_expand", glorot_uniform(Shape{c, cr}, cr, c, rng)).index;
  }
  proj_weight_ = params_.add("proj.weight", glorot_uniform(Shape{d, c}, c, d, rng)).index;
  proj_bias_ = params_.add("proj.bias", Tensor(Shape{d})).index;
  if (v == Variant::csn) csn_mask_ = params_.add("csn.mask", Tensor(Shape{n, d}, 1.0)).index;
}

void AsenModel::check_attribute(std::size_t attribute) const {
  if (attribute >= config_.n) {
    throw VocabularyError("attribute index " + std::to_string(attribute) +
                          " outside vocabulary of " + std::to_string(config_.n));
  }
}

Var AsenModel::param(Tape& tape, std::optional<std::size_t> index) const {
  if (!index) {
    throw ContractError("variant " + std::string(to_string(config_.variant)) +
                        " has no such parameter");
  }
  return tape.parameter(params_[*index]);
}

Var AsenModel::feature_map(Tape& tape, const Tensor& input) const {
  if (backbone_) return backbone_->forward(tape, input, params_);
  const std::size_t s = backbone_config_.out_spatial();
  const Shape expected{config_.c, s, s};
  if (input.shape() != expected) {
    throw DimensionError("expected feature map " + shape_string(expected) + ", got " +
                         shape_string(input.shape()));
  }
  return tape.constant(input);
}

SpatialAttention AsenModel::asa_forward(Tape& tape, Var features, std::size_t attribute) const {
  check_attribute(attribute);
  const Shape& shape = features.shape();
  if (shape.size() != 3 || shape[0] != config_.c) {
    throw DimensionError("spatial attention expects a " + std::to_string(config_.c) +
                         " x h x w map, got " + shape_string(shape));
  }
  const std::optional<Var> bias_p =
      conv_p_bias_ ? std::optional<Var>(param(tape, conv_p_bias_)) : std::nullopt;
  const std::optional<Var> bias_s =
      conv_s_bias_ ? std::optional<Var>(param(tape, conv_s_bias_)) : std::nullopt;

  Var mapped_image = ops::tanh(ops::conv_1x1(features, param(tape, conv_p_), bias_p));
  Var mapped_attr = ops::tanh(ops::select_column(param(tape, attr_embed_asa_), attribute));
  Var attr_map = ops::spatial_broadcast(mapped_attr, shape[1], shape[2]);
  Var scores =
      ops::tanh(ops::conv_1x1(ops::mul(attr_map, mapped_image), param(tape, conv_s_), bias_s));
  Var weights = ops::softmax_flat(scores);
  return {ops::weighted_spatial_sum(features, weights), weights};
}

ChannelAttention AsenModel::aca_forward(Tape& tape, Var attended, std::size_t attribute) const {
  check_attribute(attribute);
  if (attended.shape() != Shape{config_.c}) {
    throw DimensionError("channel attention expects a length-" + std::to_string(config_.c) +
                         " vector, got " + shape_string(attended.shape()));
  }
  Var attr = ops::relu(ops::select_column(param(tape, attr_embed_aca_), attribute));
  Var hidden = ops::relu(ops::fully_connected(ops::concat(attr, attended), param(tape, fc_reduce_)));
  Var gate = ops::sigmoid(ops::fully_connected(hidden, param(tape, fc_expand_)));
  return {ops::mul(attended, gate), gate};
}

Var AsenModel::embed(Tape& tape, Var features, std::size_t attribute) const {
  check_attribute(attribute);
  Var pooled;
  switch (config_.variant) {
    case Variant::full:
      pooled = aca_forward(tape, asa_forward(tape, features, attribute).attended, attribute).gated;
      break;
    case Variant::no_asa:
      pooled = aca_forward(tape, ops::mean_pool_spatial(features), attribute).gated;
      break;
    case Variant::no_aca:
      pooled = asa_forward(tape, features, attribute).attended;
      break;
    case Variant::csn:
    case Variant::triplet_plain:
      pooled = ops::mean_pool_spatial(features);
      break;
  }
  Var out = ops::fully_connected(pooled, param(tape, proj_weight_), param(tape, proj_bias_));
  if (config_.variant == Variant::csn) {
    out = ops::mul(out, ops::select_row(param(tape, csn_mask_), attribute));
  }
  return out;
}

Var AsenModel::finegrained_similarity(Tape& tape, Var features_a, Var features_b,
                                      std::span<const std::size_t> attributes) const {
  if (attributes.empty()) throw ContractError("finegrained_similarity needs >= 1 attribute");
  std::vector<Var> terms;
  terms.reserve(attributes.size());
  for (std::size_t a : attributes) {
    terms.push_back(
        ops::cosine_similarity(embed(tape, features_a, a), embed(tape, features_b, a)));
  }
  return ops::sum(terms);
}

Tensor AsenModel::embedding(const Tensor& input, std::size_t attribute) const {
  Tape tape;
  return embed(tape, feature_map(tape, input), attribute).value();
}

Real AsenModel::similarity(const Tensor& input_a, const Tensor& input_b,
                           std::span<const std::size_t> attributes) const {
  Tape tape;
  Var fa = feature_map(tape, input_a);
  Var fb = feature_map(tape, input_b);
  return finegrained_similarity(tape, fa, fb, attributes).item();
}

bool AsenModel::has_spatial_attention() const noexcept { return conv_p_.has_value(); }

std::vector<AttentionMap> AsenModel::export_attention(
    const std::string& image_id, const Tensor& input,
    std::span<const std::size_t> attributes) const {
  if (!has_spatial_attention()) {
    throw ContractError("variant " + std::string(to_string(config_.variant)) +
                        " has no spatial attention to export");
  }
  std::vector<AttentionMap> maps;
  Tape tape;
  Var features = feature_map(tape, input);
  for (std::size_t a : attributes) {
    maps.push_back({image_id, a, asa_forward(tape, features, a).weights.value()});
  }
  return maps;
}

void write_attention_file(const std::filesystem::path& path, std::span<const AttentionMap> maps,
                          std::span<const std::string> attribute_names) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  char buf[32];
  for (const auto& m : maps) {
    const std::size_t h = m.weights.dim(0), w = m.weights.dim(1);
    const std::string& name = m.attribute < attribute_names.size()
                                  ? attribute_names[m.attribute]
                                  : std::to_string(m.attribute);
    out << m.image_id << ' ' << name << ' ' << h << ' ' << w << '\n';
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::snprintf(buf, sizeof buf, "%.9g", m.weights[y * w + x]);
        out << (x ? " " : "") << buf;
      }
      out << '\n';
    }
  }
}

}  // namespace asen
