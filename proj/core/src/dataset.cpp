#include "asen/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "asen/error.hpp"
#include "asen/parallel.hpp"
#include "asen/rng.hpp"

namespace asen {

std::vector<std::string> AttributeVocabulary::names() const {
  std::vector<std::string> out;
  for (const auto& a : attributes) out.push_back(a.name);
  return out;
}

void AttributeVocabulary::validate() const {
  if (attributes.empty()) throw FormatError("empty attribute vocabulary");
  std::set<std::string> seen;
  for (const auto& a : attributes) {
    if (!seen.insert(a.name).second) throw FormatError("duplicate attribute '" + a.name + "'");
    if (a.values.size() < 2) {
      throw FormatError("attribute '" + a.name + "' needs at least two values");
    }
  }
}

std::optional<std::size_t> AnnotationRecord::value_of(std::size_t attribute) const {
  for (const auto& l : labels) {
    if (l.attribute == attribute) return l.value;
  }
  return std::nullopt;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::none: break;
  }
  return "none";
}

std::string_view to_string(Role r) {
  switch (r) {
    case Role::query: return "query";
    case Role::candidate: return "candidate";
    case Role::none: break;
  }
  return "none";
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> DatasetManifest::indices(Split split, Role role) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split && roles[i] == role) out.push_back(i);
  }
  return out;
}

void DatasetManifest::validate() const {
  vocabulary.validate();
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (!ids.insert(r.image_id).second) throw FormatError("duplicate image id '" + r.image_id + "'");
    std::set<std::size_t> attrs;
    for (const auto& l : r.labels) {
      if (l.attribute >= vocabulary.size()) {
        throw FormatError("image '" + r.image_id + "': unknown attribute index " +
                          std::to_string(l.attribute));
      }
      if (l.value >= vocabulary.attributes[l.attribute].values.size()) {
        throw FormatError("image '" + r.image_id + "': unknown value index " +
                          std::to_string(l.value) + " for attribute " +
                          std::to_string(l.attribute));
      }
      if (!attrs.insert(l.attribute).second) {
        throw FormatError("image '" + r.image_id + "' has two values for attribute " +
                          std::to_string(l.attribute));
      }
    }
  }
  if (is_split()) {
    if (splits.size() != records.size() || roles.size() != records.size()) {
      throw FormatError("split assignment does not cover every record");
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      const bool held_out = splits[i] == Split::val || splits[i] == Split::test;
      if (splits[i] == Split::none || held_out != (roles[i] != Role::none)) {
        throw FormatError("image '" + records[i].image_id + "' has an inconsistent split/role");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Manifest text format

void write_manifest(std::ostream& out, const DatasetManifest& m) {
  const auto old_precision = out.precision(17);
  out << "# asen dataset manifest\n[meta]\n";
  out << "source " << (m.source == ImageSource::raster ? "raster" : "features") << '\n';
  out << "ratios " << m.ratios[0] << ' ' << m.ratios[1] << ' ' << m.ratios[2] << '\n';
  out << "query_fraction " << m.query_fraction << '\n';
  out << "[vocabulary]\n";
  for (const auto& a : m.vocabulary.attributes) {
    out << "attribute " << a.name;
    for (const auto& v : a.values) out << ' ' << v;
    out << '\n';
  }
  out << "[records]\n";
  for (const auto& r : m.records) {
    out << r.image_id;
    for (const auto& l : r.labels) out << ' ' << l.attribute << ':' << l.value;
    out << '\n';
  }
  if (m.is_split()) {
    out << "[splits]\n";
    for (std::size_t i = 0; i < m.records.size(); ++i) {
      out << m.records[i].image_id << ' ' << to_string(m.splits[i]);
      if (m.roles[i] != Role::none) out << ' ' << to_string(m.roles[i]);
      out << '\n';
    }
  }
  out.precision(old_precision);
}

namespace {

[[noreturn]] void line_error(std::size_t line, const std::string& what) {
  throw FormatError("manifest line " + std::to_string(line) + ": " + what);
}

std::size_t parse_index(const std::string& text, std::size_t line) {
  if (text.empty() || !std::all_of(text.begin(), text.end(), ::isdigit)) {
    line_error(line, "expected a non-negative integer, got '" + text + "'");
  }
  return std::stoul(text);
}

}  // namespace

DatasetManifest read_manifest(std::istream& in) {
  DatasetManifest m;
  std::string section;
  std::vector<std::pair<std::string, std::pair<Split, Role>>> assignments;
  std::set<std::string> record_ids;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      section = line;
      if (section != "[meta]" && section != "[vocabulary]" && section != "[records]" &&
          section != "[splits]") {
        line_error(line_no, "unknown section " + section);
      }
      continue;
    }
    std::istringstream ss(line);
    std::vector<std::string> tok;
    for (std::string t; ss >> t;) tok.push_back(t);
    if (tok.empty()) continue;

    if (section == "[meta]") {
      if (tok[0] == "source" && tok.size() == 2 && (tok[1] == "raster" || tok[1] == "features")) {
        m.source = tok[1] == "raster" ? ImageSource::raster : ImageSource::features;
      } else if (tok[0] == "ratios" && tok.size() == 4) {
        for (int i = 0; i < 3; ++i) m.ratios[static_cast<std::size_t>(i)] = std::stod(tok[static_cast<std::size_t>(i) + 1]);
      } else if (tok[0] == "query_fraction" && tok.size() == 2) {
        m.query_fraction = std::stod(tok[1]);
      } else {
        line_error(line_no, "malformed meta entry");
      }
    } else if (section == "[vocabulary]") {
      if (tok[0] != "attribute" || tok.size() < 2) line_error(line_no, "malformed attribute line");
      m.vocabulary.attributes.push_back({tok[1], {tok.begin() + 2, tok.end()}});
    } else if (section == "[records]") {
      if (!record_ids.insert(tok[0]).second) line_error(line_no, "duplicate image id '" + tok[0] + "'");
      AnnotationRecord r{tok[0], {}};
      for (std::size_t i = 1; i < tok.size(); ++i) {
        const auto colon = tok[i].find(':');
        if (colon == std::string::npos) line_error(line_no, "expected attr:value, got '" + tok[i] + "'");
        const Label l{parse_index(tok[i].substr(0, colon), line_no),
                      parse_index(tok[i].substr(colon + 1), line_no)};
        if (r.value_of(l.attribute)) {
          line_error(line_no, "image '" + r.image_id + "' has two values for attribute " +
                                  std::to_string(l.attribute));
        }
        if (l.attribute >= m.vocabulary.size()) {
          line_error(line_no, "unknown attribute index " + std::to_string(l.attribute));
        }
        if (l.value >= m.vocabulary.attributes[l.attribute].values.size()) {
          line_error(line_no, "unknown value index " + std::to_string(l.value));
        }
        r.labels.push_back(l);
      }
      m.records.push_back(std::move(r));
    } else if (section == "[splits]") {
      if (tok.size() < 2 || tok.size() > 3) line_error(line_no, "malformed split line");
      Split s = Split::none;
      if (tok[1] == "train") s = Split::train;
      else if (tok[1] == "val") s = Split::val;
      else if (tok[1] == "test") s = Split::test;
      else line_error(line_no, "unknown split '" + tok[1] + "'");
      Role r = Role::none;
      if (tok.size() == 3) {
        if (tok[2] == "query") r = Role::query;
        else if (tok[2] == "candidate") r = Role::candidate;
        else line_error(line_no, "unknown role '" + tok[2] + "'");
      }
      assignments.push_back({tok[0], {s, r}});
    } else {
      line_error(line_no, "content outside any section");
    }
  }

  if (!assignments.empty()) {
    if (assignments.size() != m.records.size()) {
      throw FormatError("[splits] lists " + std::to_string(assignments.size()) +
                        " images for " + std::to_string(m.records.size()) + " records");
    }
    for (std::size_t i = 0; i < assignments.size(); ++i) {
      if (assignments[i].first != m.records[i].image_id) {
        throw FormatError("[splits] entry " + std::to_string(i) + " names '" +
                          assignments[i].first + "', expected '" + m.records[i].image_id + "'");
      }
      m.splits.push_back(assignments[i].second.first);
      m.roles.push_back(assignments[i].second.second);
    }
  }
  m.validate();
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_manifest(out, manifest);
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  return read_manifest(in);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
  if (n_attributes < 1) throw SpecError("need at least one attribute");
  if (quadrants.size() != n_attributes) {
    throw SpecError("region map lists " + std::to_string(quadrants.size()) + " quadrants for " +
                    std::to_string(n_attributes) + " attributes");
  }
  std::set<std::size_t> used;
  for (std::size_t q : quadrants) {
    if (q > 3) throw SpecError("quadrant index " + std::to_string(q) + " out of range");
    if (!used.insert(q).second) throw SpecError("region map overlap on quadrant " + std::to_string(q));
  }
  if (values_per_attribute < 2) throw SpecError("need at least two values per attribute");
  if (image_size < 8 || image_size % 2 != 0) throw SpecError("image size must be even and >= 8");
  if (noise < 0) throw SpecError("noise amplitude must be non-negative");
}

std::array<Real, 3> palette_color(std::size_t value, std::size_t value_count) {
  // Evenly spaced hues at saturation 0.85, brightness 0.9.
  const Real h = 6.0 * static_cast<Real>(value) / static_cast<Real>(value_count);
  const Real vmax = 0.9, vmin = 0.9 * (1.0 - 0.85);
  const Real f = h - std::floor(h);
  const Real rise = vmin + (vmax - vmin) * f, fall = vmax - (vmax - vmin) * f;
  switch (static_cast<int>(std::floor(h)) % 6) {
    case 0: return {vmax, rise, vmin};
    case 1: return {fall, vmax, vmin};
    case 2: return {vmin, vmax, rise};
    case 3: return {vmin, fall, vmax};
    case 4: return {rise, vmin, vmax};
    default: return {vmax, vmin, fall};
  }
}

namespace {

constexpr Real kBackground = 0.15;

// Attribute-specific texture: horizontal, vertical, checkerboard or diagonal stripes.
bool texture_on(std::size_t attribute, std::size_t y, std::size_t x) {
  switch (attribute % 4) {
    case 0: return (y / 2) % 2 == 0;
    case 1: return (x / 2) % 2 == 0;
    case 2: return (x / 2 + y / 2) % 2 == 0;
    default: return ((x + y) / 2) % 2 == 0;
  }
}

}  // namespace

Tensor render_synthetic_image(const SyntheticSpec& spec, std::span<const std::size_t> values,
                              std::uint64_t image_seed) {
  const std::size_t s = spec.image_size, half = s / 2;
  Tensor img(Shape{3, s, s}, kBackground);
  for (std::size_t a = 0; a < spec.n_attributes; ++a) {
    const auto color = palette_color(values[a], spec.values_per_attribute);
    const std::size_t y0 = (spec.quadrants[a] / 2) * half, x0 = (spec.quadrants[a] % 2) * half;
    for (std::size_t y = 0; y < half; ++y) {
      for (std::size_t x = 0; x < half; ++x) {
        if (!texture_on(a, y, x)) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y0 + y, x0 + x) = color[ch];
      }
    }
  }
  if (spec.noise > 0) {
    Rng rng(image_seed);
    for (Real& v : img.data()) v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
  }
  return img;
}

Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  auto& vocab = ds.manifest.vocabulary;
  static constexpr const char* kQuadrantNames[] = {"top_left", "top_right", "bottom_left",
                                                   "bottom_right"};
  for (std::size_t a = 0; a < spec.n_attributes; ++a) {
    AttributeInfo info{kQuadrantNames[spec.quadrants[a]], {}};
    for (std::size_t v = 0; v < spec.values_per_attribute; ++v) info.values.push_back("v" + std::to_string(v));
    vocab.attributes.push_back(std::move(info));
  }

  ds.manifest.records.resize(spec.images);
  ds.inputs.resize(spec.images);
  parallel_for(spec.images, 1, [&](std::size_t i) {
    const std::uint64_t image_seed = spec.seed ^ i;
    Rng rng(image_seed);
    std::vector<std::size_t> values(spec.n_attributes);
    auto& rec = ds.manifest.records[i];
    char id[32];
    std::snprintf(id, sizeof id, "img_%05zu", i);
    rec.image_id = id;
    for (std::size_t a = 0; a < spec.n_attributes; ++a) {
      values[a] = rng.index(spec.values_per_attribute);
      rec.labels.push_back({a, values[a]});
    }
    ds.inputs[i] = render_synthetic_image(spec, values, rng.next());
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting

SplitResult split_dataset(const DatasetManifest& manifest, const SplitOptions& options) {
  const Real total = options.ratios[0] + options.ratios[1] + options.ratios[2];
  if (options.ratios[0] <= 0 || options.ratios[1] <= 0 || options.ratios[2] <= 0) {
    throw ContractError("split ratios must be positive");
  }
  if (options.query_fraction <= 0 || options.query_fraction >= 1) {
    throw ContractError("query fraction must lie in (0, 1)");
  }
  const std::size_t n = manifest.records.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(options.seed);
  rng.shuffle(order);

  // Small epsilon so exact ratios (8:1:1 of 10) are not lost to rounding.
  const auto share = [&](Real r) {
    return static_cast<std::size_t>(std::floor(static_cast<Real>(n) * r / total + 1e-9));
  };
  const std::size_t n_train = share(options.ratios[0]);
  const std::size_t n_val = std::min(n - n_train, share(options.ratios[1]));

  SplitResult result;
  result.manifest = manifest;
  auto& m = result.manifest;
  m.ratios = {options.ratios[0] / total, options.ratios[1] / total, options.ratios[2] / total};
  m.query_fraction = options.query_fraction;
  m.splits.assign(n, Split::none);
  m.roles.assign(n, Role::none);

  const auto assign = [&](std::size_t begin, std::size_t end, Split split,
                          std::array<std::size_t, 2>* roles) {
    const std::size_t size = end - begin;
    const auto queries = static_cast<std::size_t>(std::llround(options.query_fraction * static_cast<Real>(size)));
    for (std::size_t k = begin; k < end; ++k) {
      m.splits[order[k]] = split;
      if (roles) {
        const bool is_query = k - begin < queries;
        m.roles[order[k]] = is_query ? Role::query : Role::candidate;
        ++(*roles)[is_query ? 0 : 1];
      }
    }
  };
  assign(0, n_train, Split::train, nullptr);
  assign(n_train, n_train + n_val, Split::val, &result.val_roles);
  assign(n_train + n_val, n, Split::test, &result.test_roles);
  result.counts = {n_train, n_val, n - n_train - n_val};

  const auto& vocab = m.vocabulary;
  std::vector<std::vector<bool>> seen(vocab.size());
  for (std::size_t a = 0; a < vocab.size(); ++a) seen[a].assign(vocab.attributes[a].values.size(), false);
  for (std::size_t i = 0; i < n; ++i) {
    if (m.splits[i] != Split::train) continue;
    for (const auto& l : m.records[i].labels) seen[l.attribute][l.value] = true;
  }
  for (std::size_t a = 0; a < vocab.size(); ++a) {
    for (std::size_t v = 0; v < seen[a].size(); ++v) {
      if (!seen[a][v]) {
        result.warnings.push_back("value '" + vocab.attributes[a].values[v] + "' of attribute '" +
                                  vocab.attributes[a].name + "' is absent from the train split");
      }
    }
  }
  return result;
}

std::size_t quadrant_of(std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  return (2 * y >= h ? 2 : 0) + (2 * x >= w ? 1 : 0);
}

Real quadrant_mass(const Tensor& weights, std::size_t quadrant) {
  const std::size_t h = weights.dim(0), w = weights.dim(1);
  Real mass = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (quadrant_of(y, x, h, w) == quadrant) mass += weights[y * w + x];
    }
  }
  return mass;
}

// ---------------------------------------------------------------------------
// Raster IO

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("PPM needs a 3 x H x W image, got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const Real v = std::clamp(image.at(c, y, x), 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
}

Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open image " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw FormatError(path.string() + ": not an 8-bit binary PPM");
  }
  in.get();
  std::vector<char> raw(w * h * 3);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  Tensor img(Shape{3, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = static_cast<unsigned char>(raw[(y * w + x) * 3 + c]) / 255.0;
      }
    }
  }
  return img;
}

Dataset load_raster_dataset(const std::filesystem::path& manifest_path,
                            const std::filesystem::path& image_dir) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  if (ds.manifest.source != ImageSource::raster) {
    throw FormatError(manifest_path.string() + " describes precomputed features, not rasters");
  }
  for (const auto& r : ds.manifest.records) ds.inputs.push_back(read_ppm(image_dir / (r.image_id + ".ppm")));
  return ds;
}

}  // namespace asen
