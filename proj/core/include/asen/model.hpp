#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "asen/autodiff.hpp"
#include "asen/backbone.hpp"

namespace asen {

enum class Variant { full, no_asa, no_aca, csn, triplet_plain };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct AsenConfig {
  std::size_t c = 32;        // backbone channels
  std::size_t c_prime = 16;  // spatial-attention mapping dimension
  std::size_t r = 16;        // channel-attention reduction rate
  std::size_t d_embed = 32;
  std::size_t n = 4;  // attribute count
  Variant variant = Variant::full;
  // Biases on the two 1x1 convolutions of the spatial attention branch.
  bool attention_conv_bias = false;

  std::size_t reduced() const noexcept { return c / r; }
  void validate() const;
};

struct SpatialAttention {
  Var attended;  // I_s, length c
  Var weights;   // alpha_s, h x w
};

struct ChannelAttention {
  Var gated;  // I_c, length c
  Var gate;   // alpha_c, length c
};

struct AttentionMap {
  std::string image_id;
  std::size_t attribute = 0;
  Tensor weights;  // h x w, sums to one
};

/// Attribute-specific embedding network: spatial attention, channel attention and a final
/// projection over a backbone feature map, plus the four comparison variants.
class AsenModel {
 public:
  AsenModel(const AsenConfig& config, const BackboneConfig& backbone, std::uint64_t seed);

  const AsenConfig& config() const noexcept { return config_; }
  const BackboneConfig& backbone_config() const noexcept { return backbone_config_; }
  ParameterSet& parameters() noexcept { return params_; }
  const ParameterSet& parameters() const noexcept { return params_; }

  /// Image -> backbone map for tiny_conv, or the map itself for precomputed features.
  Var feature_map(Tape& tape, const Tensor& input) const;

  SpatialAttention asa_forward(Tape& tape, Var features, std::size_t attribute) const;
  ChannelAttention aca_forward(Tape& tape, Var attended, std::size_t attribute) const;
  Var embed(Tape& tape, Var features, std::size_t attribute) const;
  /// Sum over `attributes` of the cosine similarity between the two embeddings.
  Var finegrained_similarity(Tape& tape, Var features_a, Var features_b,
                             std::span<const std::size_t> attributes) const;

  // Tape-free conveniences.
  Tensor embedding(const Tensor& input, std::size_t attribute) const;
  Real similarity(const Tensor& input_a, const Tensor& input_b,
                  std::span<const std::size_t> attributes) const;

  bool has_spatial_attention() const noexcept;
  std::vector<AttentionMap> export_attention(const std::string& image_id, const Tensor& input,
                                             std::span<const std::size_t> attributes) const;

 private:
  void check_attribute(std::size_t attribute) const;
  Var param(Tape& tape, std::optional<std::size_t> index) const;

  AsenConfig config_;
  BackboneConfig backbone_config_;
  ParameterSet params_;
  std::optional<TinyBackbone> backbone_;

  std::optional<std::size_t> conv_p_, conv_p_bias_, attr_embed_asa_, conv_s_, conv_s_bias_;
  std::optional<std::size_t> attr_embed_aca_, fc_reduce_, fc_expand_;
  std::optional<std::size_t> proj_weight_, proj_bias_, csn_mask_;
};

/// Writes one block per map: "image_id attribute_name h w" then h rows of w values.
void write_attention_file(const std::filesystem::path& path, std::span<const AttentionMap> maps,
                          std::span<const std::string> attribute_names);

}  // namespace asen
