#include "asen/backbone.hpp"

#include <cmath>
#include <fstream>
#include <memory>

#include "asen/error.hpp"
#include "asen/ops.hpp"
#include "asen/serialize.hpp"

namespace asen {

std::size_t BackboneConfig::out_spatial() const noexcept {
  if (kind == BackboneKind::precomputed) return precomputed_spatial;
  std::size_t size = image_size;
  for (std::size_t s = 0; s < stages(); ++s) size = (size - kStageKernel) / kStageStride + 1;
  return size;
}

void BackboneConfig::validate() const {
  if (kind == BackboneKind::precomputed) {
    if (out_channels < 1) throw ContractError("precomputed features need at least one channel");
    if (precomputed_spatial < 1) throw ContractError("precomputed spatial extent must be >= 1");
    return;
  }
  if (out_channels < 4) throw ContractError("backbone out_channels must be >= 4");
  if (image_channels == 0) throw ContractError("backbone needs at least one image channel");
  std::size_t size = image_size;
  for (std::size_t s = 0; s < stages(); ++s) {
    if (size < kStageKernel) {
      throw ContractError("image size " + std::to_string(image_size) + " too small for " +
                          std::to_string(stages()) + " stages");
    }
    size = (size - kStageKernel) / kStageStride + 1;
  }
  if (size < 2) throw ContractError("backbone output spatial extent must be >= 2");
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const Real bound = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
  Tensor t(std::move(shape));
  for (Real& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Var strided_conv2d(Var input, Var kernel, Var bias, std::size_t stride) {
  const Tensor& in = input.value();
  const Tensor& k = kernel.value();
  if (in.rank() != 3 || k.rank() != 4 || k.dim(1) != in.dim(0) || k.dim(2) != k.dim(3) ||
      bias.value().shape() != Shape{k.dim(0)}) {
    throw DimensionError("strided_conv2d: input " + shape_string(in.shape()) + ", kernel " +
                         shape_string(k.shape()) + ", bias " + shape_string(bias.shape()));
  }
  const std::size_t cin = in.dim(0), ih = in.dim(1), iw = in.dim(2);
  const std::size_t cout = k.dim(0), ks = k.dim(2);
  if (ih < ks || iw < ks) throw DimensionError("strided_conv2d: input smaller than kernel");
  const std::size_t oh = (ih - ks) / stride + 1, ow = (iw - ks) / stride + 1;
  const std::size_t rows = cin * ks * ks, cols = oh * ow;

  // Patch matrix: row (c, ky, kx), column (y, x). Kept alive for the backward pass.
  auto patches = std::make_shared<std::vector<Real>>(rows * cols);
  const Real* src = in.data().data();
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < ks; ++ky) {
      for (std::size_t kx = 0; kx < ks; ++kx) {
        Real* row = patches->data() + ((c * ks + ky) * ks + kx) * cols;
        for (std::size_t y = 0; y < oh; ++y) {
          const Real* line = src + (c * ih + y * stride + ky) * iw + kx;
          for (std::size_t x = 0; x < ow; ++x) row[y * ow + x] = line[x * stride];
        }
      }
    }
  }

  Tensor out(Shape{cout, oh, ow});
  const Real* wts = k.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    Real* dst = out.data().data() + o * cols;
    std::fill(dst, dst + cols, bias.value()[o]);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real w = wts[o * rows + r];
      const Real* row = patches->data() + r * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += w * row[j];
    }
  }

  return input.tape()->record(
      std::move(out), {input, kernel, bias},
      [=](const Tensor& g, std::span<Tensor* const> pg) {
        const Real* grad = g.data().data();
        if (pg[2]) {
          for (std::size_t o = 0; o < cout; ++o) {
            Real acc = 0;
            for (std::size_t j = 0; j < cols; ++j) acc += grad[o * cols + j];
            (*pg[2])[o] += acc;
          }
        }
        if (pg[1]) {
          Real* gk = pg[1]->data().data();
          for (std::size_t o = 0; o < cout; ++o) {
            const Real* go = grad + o * cols;
            for (std::size_t r = 0; r < rows; ++r) {
              const Real* row = patches->data() + r * cols;
              Real acc = 0;
              for (std::size_t j = 0; j < cols; ++j) acc += go[j] * row[j];
              gk[o * rows + r] += acc;
            }
          }
        }
        if (pg[0]) {
          const Real* wts = kernel.value().data().data();
          std::vector<Real> gpatch(rows * cols, 0.0);
          for (std::size_t o = 0; o < cout; ++o) {
            const Real* go = grad + o * cols;
            for (std::size_t r = 0; r < rows; ++r) {
              const Real w = wts[o * rows + r];
              Real* dst = gpatch.data() + r * cols;
              for (std::size_t j = 0; j < cols; ++j) dst[j] += w * go[j];
            }
          }
          Real* gin = pg[0]->data().data();
          for (std::size_t c = 0; c < cin; ++c) {
            for (std::size_t ky = 0; ky < ks; ++ky) {
              for (std::size_t kx = 0; kx < ks; ++kx) {
                const Real* row = gpatch.data() + ((c * ks + ky) * ks + kx) * cols;
                for (std::size_t y = 0; y < oh; ++y) {
                  Real* line = gin + (c * ih + y * stride + ky) * iw + kx;
                  for (std::size_t x = 0; x < ow; ++x) line[x * stride] += row[y * ow + x];
                }
              }
            }
          }
        }
      },
      "strided_conv2d");
}

TinyBackbone::TinyBackbone(const BackboneConfig& config, ParameterSet& params, Rng& rng)
    : config_(config) {
  config_.validate();
  if (config_.kind != BackboneKind::tiny_conv) {
    throw ContractError("TinyBackbone requires kind tiny_conv");
  }
  std::vector<std::size_t> widths = config_.stage_widths;
  widths.push_back(config_.out_channels);
  std::size_t cin = config_.image_channels;
  const std::size_t area = kStageKernel * kStageKernel;
  for (std::size_t s = 0; s < widths.size(); ++s) {
    const std::size_t cout = widths[s];
    const std::string prefix = "backbone.stage" + std::to_string(s + 1);
    Parameter& w = params.add(prefix + ".weight",
                              glorot_uniform(Shape{cout, cin, kStageKernel, kStageKernel},
                                             cin * area, cout * area, rng));
    Parameter& b = params.add(prefix + ".bias", Tensor(Shape{cout}));
    stages_.emplace_back(w.index, b.index);
    cin = cout;
  }
}

Var TinyBackbone::forward(Tape& tape, const Tensor& image, const ParameterSet& params) const {
  const Shape expected{config_.image_channels, config_.image_size, config_.image_size};
  if (image.shape() != expected) {
    throw DimensionError("backbone expects image " + shape_string(expected) + ", got " +
                         shape_string(image.shape()));
  }
  Var x = tape.constant(image);
  for (auto [wi, bi] : stages_) {
    x = ops::relu(strided_conv2d(x, tape.parameter(params[wi]), tape.parameter(params[bi]),
                                 kStageStride));
  }
  return x;
}

std::vector<FeatureRecord> load_precomputed_features(const std::filesystem::path& manifest,
                                                     const std::filesystem::path& tensors,
                                                     const Shape& expected) {
  std::ifstream ids_in(manifest);
  if (!ids_in) throw FormatError("cannot open feature manifest " + manifest.string());
  std::vector<std::string> ids;
  for (std::string line; std::getline(ids_in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ids.push_back(line);
  }

  std::ifstream in(tensors, std::ios::binary);
  if (!in) throw FormatError("cannot open feature tensor file " + tensors.string());
  std::uint64_t offset = 0;
  const Tensor stacked = read_tensor(in, offset);
  if (expected.size() != 3 || stacked.rank() != 4 || stacked.dim(0) != ids.size() ||
      !std::equal(expected.begin(), expected.end(), stacked.shape().begin() + 1)) {
    throw FormatError("feature tensor extents at byte 8: " + shape_string(stacked.shape()) +
                      " do not match " + std::to_string(ids.size()) + " ids of " +
                      shape_string(expected));
  }

  const std::size_t per = shape_size(expected);
  std::vector<FeatureRecord> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto first = stacked.values().begin() + static_cast<std::ptrdiff_t>(i * per);
    out.push_back({ids[i], Tensor(expected, std::vector<Real>(first, first + static_cast<std::ptrdiff_t>(per)))});
  }
  return out;
}

void save_precomputed_features(const std::filesystem::path& manifest,
                               const std::filesystem::path& tensors,
                               const std::vector<FeatureRecord>& records) {
  if (records.empty()) throw ContractError("no feature records to save");
  const Shape& shape = records.front().features.shape();
  if (shape.size() != 3) throw DimensionError("feature maps must be c x h x w");
  std::vector<Real> data;
  data.reserve(records.size() * shape_size(shape));
  std::ofstream ids(manifest);
  for (const auto& r : records) {
    if (r.features.shape() != shape) {
      throw DimensionError("feature map of '" + r.image_id + "' has shape " +
                           shape_string(r.features.shape()));
    }
    ids << r.image_id << '\n';
    data.insert(data.end(), r.features.values().begin(), r.features.values().end());
  }
  save_tensor(tensors, Tensor(Shape{records.size(), shape[0], shape[1], shape[2]}, std::move(data)));
}

}  // namespace asen
