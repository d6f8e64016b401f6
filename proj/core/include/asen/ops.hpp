#pragma once

#include <cstddef>
#include <optional>
#include <span>

#include "asen/autodiff.hpp"

namespace asen::ops {

enum class Activation { tanh, relu, sigmoid };
enum class Combine { mul, concat };

// Norm below which cosine_similarity refuses to divide.
inline constexpr Real kDegenerateNorm = 1e-12;

/// out[o,y,x] = sum_c kernel[o,c] * input[c,y,x] (+ bias[o]).
Var conv_1x1(Var input, Var kernel, std::optional<Var> bias = std::nullopt);

/// weight * input (+ bias) for a vector input.
Var fully_connected(Var input, Var weight, std::optional<Var> bias = std::nullopt);

/// Column `index` of a matrix; equal to weight * one_hot(index).
Var select_column(Var weight, std::size_t index);

/// Row `index` of a matrix.
Var select_row(Var weight, std::size_t index);

Var activation(Var input, Activation kind);
inline Var tanh(Var x) { return activation(x, Activation::tanh); }
inline Var relu(Var x) { return activation(x, Activation::relu); }
inline Var sigmoid(Var x) { return activation(x, Activation::sigmoid); }

/// Max-stabilised softmax over every location of a 1 x h x w map; returns h x w.
Var softmax_flat(Var scores);

/// out[k] = sum_j weights[j] * features[k, j] over the h*w locations.
Var weighted_spatial_sum(Var features, Var weights);

/// Per-channel arithmetic mean over the spatial extent.
Var mean_pool_spatial(Var features);

/// Duplicates a length-c vector over an h x w grid.
Var spatial_broadcast(Var vec, std::size_t height, std::size_t width);

Var combine(Var a, Var b, Combine kind);
inline Var mul(Var a, Var b) { return combine(a, b, Combine::mul); }
// Joins along the leading axis.
inline Var concat(Var a, Var b) { return combine(a, b, Combine::concat); }

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var sum(std::span<const Var> terms);
Var mean(std::span<const Var> terms);
Var sum_all(Var x);
// scale * x + shift, elementwise.
Var affine(Var x, Real scale, Real shift);

/// dot(u,v) / (|u| |v|); throws DegenerateVectorError if either norm < 1e-12.
Var cosine_similarity(Var u, Var v);

Tensor one_hot(std::size_t length, std::size_t index);

}  // namespace asen::ops
