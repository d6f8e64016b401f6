#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asen/tensor.hpp"

namespace asen {

struct AttributeInfo {
  std::string name;
  std::vector<std::string> values;
  friend bool operator==(const AttributeInfo&, const AttributeInfo&) = default;
};

struct AttributeVocabulary {
  std::vector<AttributeInfo> attributes;

  std::size_t size() const noexcept { return attributes.size(); }
  std::vector<std::string> names() const;
  void validate() const;

  friend bool operator==(const AttributeVocabulary&, const AttributeVocabulary&) = default;
};

struct Label {
  std::size_t attribute = 0;
  std::size_t value = 0;
  friend bool operator==(const Label&, const Label&) = default;
};

struct AnnotationRecord {
  std::string image_id;
  std::vector<Label> labels;

  std::optional<std::size_t> value_of(std::size_t attribute) const;
  friend bool operator==(const AnnotationRecord&, const AnnotationRecord&) = default;
};

enum class Split { none, train, val, test };
enum class Role { none, query, candidate };
enum class ImageSource { raster, features };

std::string_view to_string(Split s);
std::string_view to_string(Role r);

struct DatasetManifest {
  AttributeVocabulary vocabulary;
  std::vector<AnnotationRecord> records;
  ImageSource source = ImageSource::raster;
  // Parallel to records; empty until the dataset is split.
  std::vector<Split> splits;
  std::vector<Role> roles;
  std::array<Real, 3> ratios = {0.8, 0.1, 0.1};
  Real query_fraction = 0.2;

  bool is_split() const noexcept { return !splits.empty(); }
  std::vector<std::size_t> indices(Split split) const;
  std::vector<std::size_t> indices(Split split, Role role) const;
  void validate() const;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Manifest plus one model input per record (image or precomputed feature map).
struct Dataset {
  DatasetManifest manifest;
  std::vector<Tensor> inputs;
};

// Line-oriented text format: [meta], [vocabulary], [records] and optional [splits]
// sections; record lines read "image_id attr:value attr:value ...".
void write_manifest(std::ostream& out, const DatasetManifest& manifest);
DatasetManifest read_manifest(std::istream& in);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

struct SyntheticSpec {
  std::size_t n_attributes = 4;
  std::size_t values_per_attribute = 4;
  std::size_t images = 2000;
  std::size_t image_size = 32;
  Real noise = 0.1;
  std::uint64_t seed = 0;
  // Quadrant owned by each attribute: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
  std::vector<std::size_t> quadrants = {0, 1, 2, 3};

  void validate() const;
};

/// Each attribute's value is painted only inside the attribute's quadrant, as a texture
/// specific to the attribute in a colour specific to the value, plus uniform pixel noise.
Dataset generate_synthetic_dataset(const SyntheticSpec& spec);

/// Renders one image; identical labels at zero noise give identical rasters.
Tensor render_synthetic_image(const SyntheticSpec& spec, std::span<const std::size_t> values,
                              std::uint64_t image_seed);

std::array<Real, 3> palette_color(std::size_t value, std::size_t value_count);

struct SplitOptions {
  std::array<Real, 3> ratios = {8, 1, 1};
  Real query_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct SplitResult {
  DatasetManifest manifest;
  std::array<std::size_t, 3> counts{};  // train, val, test
  std::array<std::size_t, 2> val_roles{}, test_roles{};  // query, candidate
  std::vector<std::string> warnings;
};

SplitResult split_dataset(const DatasetManifest& manifest, const SplitOptions& options);

/// Row/column quadrant of cell (y, x) in an h x w grid.
std::size_t quadrant_of(std::size_t y, std::size_t x, std::size_t h, std::size_t w);
/// Total weight of an h x w map inside one quadrant.
Real quadrant_mass(const Tensor& weights, std::size_t quadrant);

// Binary PPM (P6, maxval 255) for 3 x H x W images in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);

/// Loads the manifest and, for raster sources, every image as <image_dir>/<id>.ppm.
Dataset load_raster_dataset(const std::filesystem::path& manifest_path,
                            const std::filesystem::path& image_dir);

}  // namespace asen
