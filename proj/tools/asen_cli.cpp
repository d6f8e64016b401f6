// asen: data generation, training and evaluation front end.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "asen/dataset.hpp"
#include "asen/error.hpp"
#include "asen/evaluation.hpp"
#include "asen/grad_check.hpp"
#include "asen/serialize.hpp"
#include "asen/training.hpp"

namespace fs = std::filesystem;
using namespace asen;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumerical = 3;

struct Common {
  std::uint64_t seed = 1;
  std::string variant = "full";
  std::vector<std::string> attrs;
  std::string out = ".";
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
};

struct DataArgs {
  std::string manifest;
  std::string images;    // raster directory, default <manifest dir>/images
  std::string features;  // stacked n x c x h x w tensor in record order
};

void add_data_options(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--manifest", d.manifest, "Split manifest")->required()->check(CLI::ExistingFile);
  cmd->add_option("--images", d.images, "Directory of <id>.ppm rasters");
  cmd->add_option("--features", d.features, "Precomputed feature tensor")->check(CLI::ExistingFile);
}

Dataset load_data(const DataArgs& d) {
  if (d.features.empty()) {
    const fs::path dir = d.images.empty() ? fs::path(d.manifest).parent_path() / "images" : fs::path(d.images);
    return load_raster_dataset(d.manifest, dir);
  }
  Dataset ds;
  ds.manifest = load_manifest(d.manifest);
  const Tensor stacked = load_tensor(d.features);
  if (stacked.rank() != 4 || stacked.dim(0) != ds.manifest.records.size() || stacked.dim(2) != stacked.dim(3)) {
    throw FormatError(d.features + ": expected " + std::to_string(ds.manifest.records.size()) +
                      " square c x h x w maps, got " + shape_string(stacked.shape()));
  }
  const Shape shape{stacked.dim(1), stacked.dim(2), stacked.dim(3)};
  const std::size_t per = shape_size(shape);
  for (std::size_t i = 0; i < stacked.dim(0); ++i) {
    const auto first = stacked.values().begin() + static_cast<std::ptrdiff_t>(i * per);
    ds.inputs.emplace_back(shape, std::vector<Real>(first, first + static_cast<std::ptrdiff_t>(per)));
  }
  return ds;
}

BackboneConfig backbone_for(const Dataset& ds, std::size_t channels) {
  if (ds.inputs.empty()) throw FormatError("dataset has no images");
  const Tensor& first = ds.inputs.front();
  BackboneConfig b;
  if (ds.manifest.source == ImageSource::features) {
    b.kind = BackboneKind::precomputed;
    b.out_channels = first.dim(0);
    b.precomputed_spatial = first.dim(1);
  } else {
    b.image_channels = first.dim(0);
    b.image_size = first.dim(1);
    b.out_channels = channels;
  }
  return b;
}

std::vector<std::size_t> attribute_indices(const AttributeVocabulary& vocab, const std::vector<std::string>& names) {
  std::vector<std::size_t> out;
  if (names.empty()) {
    out.resize(vocab.size());
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  for (const auto& name : names) {
    auto it = std::find_if(vocab.attributes.begin(), vocab.attributes.end(),
                           [&](const AttributeInfo& a) { return a.name == name; });
    if (it == vocab.attributes.end()) throw VocabularyError("unknown attribute '" + name + "'");
    out.push_back(static_cast<std::size_t>(it - vocab.attributes.begin()));
  }
  return out;
}

AsenModel load_model(const std::string& path, const Dataset& ds) {
  AsenModel model = model_from_checkpoint(load_checkpoint(path));
  if (model.config().n != ds.manifest.vocabulary.size()) {
    throw VocabularyError("checkpoint has " + std::to_string(model.config().n) + " attributes, manifest has " +
                          std::to_string(ds.manifest.vocabulary.size()));
  }
  return model;
}

Split parse_split(const std::string& s) { return s == "val" ? Split::val : Split::test; }

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

fs::path output(const Common& c, const std::string& name) {
  fs::create_directories(c.out);
  return fs::path(c.out) / name;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  SyntheticSpec spec;
};

void run_gen(const Common& c, GenArgs g) {
  g.spec.seed = c.seed;
  g.spec.quadrants.resize(g.spec.n_attributes);
  std::iota(g.spec.quadrants.begin(), g.spec.quadrants.end(), 0);
  const Dataset ds = generate_synthetic_dataset(g.spec);
  const fs::path images = output(c, "images");
  fs::create_directories(images);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    write_ppm(images / (ds.manifest.records[i].image_id + ".ppm"), ds.inputs[i]);
  }
  save_manifest(output(c, "manifest.txt"), ds.manifest);
  std::cout << "wrote " << ds.inputs.size() << " images and " << (fs::path(c.out) / "manifest.txt").string() << '\n';
}

struct SplitArgs {
  std::string manifest;
  std::vector<Real> ratios = {8, 1, 1};
  Real query_fraction = 0.2;
};

void run_split(const Common& c, const SplitArgs& s) {
  if (s.ratios.size() != 3) throw ContractError("--ratios needs three values");
  const SplitResult r = split_dataset(load_manifest(s.manifest), {{s.ratios[0], s.ratios[1], s.ratios[2]}, s.query_fraction, c.seed});
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  save_manifest(output(c, "manifest_split.txt"), r.manifest);
  std::printf("train %zu  val %zu (%zu queries, %zu candidates)  test %zu (%zu queries, %zu candidates)\n",
              r.counts[0], r.counts[1], r.val_roles[0], r.val_roles[1], r.counts[2], r.test_roles[0],
              r.test_roles[1]);
}

struct TrainArgs {
  DataArgs data;
  TrainConfig train;
  AsenConfig model;
  std::string validation = "map";
  std::size_t validation_triplets = 2000;
};

void run_train(const Common& c, TrainArgs t) {
  const Dataset ds = load_data(t.data);
  t.model.variant = parse_variant(c.variant);
  t.model.n = ds.manifest.vocabulary.size();
  const BackboneConfig backbone = backbone_for(ds, t.model.c);
  t.model.c = backbone.out_channels;
  t.train.seed = c.seed;
  t.train.threads = c.threads;
  AsenModel model(t.model, backbone, c.seed);

  Validator validator;
  if (t.validation == "map") {
    validator = map_validator(ds, Split::val, c.threads);
  } else {
    const auto pool = ds.manifest.indices(Split::val);
    validator = triplet_accuracy_validator(ds, sample_triplets(ds.manifest, pool, t.validation_triplets, c.seed ^ 0x7a1ULL), c.threads);
  }
  const std::string name = c.variant + "_seed" + std::to_string(c.seed);
  std::ofstream log = open_out(output(c, name + "_train.tsv"));
  const FitResult r = fit(model, ds, t.train, validator, &log);
  save_checkpoint(output(c, name + ".ckpt"), r.best);
  std::printf("best epoch %zu, validation %s %.6f, config hash %s\n", r.best.epoch, t.validation.c_str(),
              r.best.metric, r.best.config_hash.c_str());
}

struct EvalArgs {
  DataArgs data;
  std::string checkpoint;
  std::string split = "test";
  std::size_t triplets = 5000;
};

void run_eval_map(const Common& c, const EvalArgs& e) {
  const Dataset ds = load_data(e.data);
  const AsenModel model = load_model(e.checkpoint, ds);
  const Split split = parse_split(e.split);
  const RetrievalSplit rs = make_retrieval_split(ds.manifest, split);
  EvalReport report = evaluate_map(EmbeddingScorer(model, ds.inputs, ds.manifest.indices(split), c.threads), rs,
                                   ds.manifest.vocabulary);
  report.variant = stem(e.checkpoint);
  std::ofstream out = open_out(output(c, "map_" + stem(e.checkpoint) + "_" + e.split + ".tsv"));
  const EvalReport reports[] = {report};
  write_report(out, reports);
  write_report(std::cout, reports);
  std::printf("%zu queries, %zu excluded; random ranking MAP %.2f\n", report.queries, report.excluded_queries,
              100.0 * random_baseline_map(rs, ds.manifest.vocabulary));
}

void run_eval_triplet(const Common& c, const EvalArgs& e) {
  const Dataset ds = load_data(e.data);
  const AsenModel model = load_model(e.checkpoint, ds);
  const auto pool = ds.manifest.indices(parse_split(e.split));
  const auto triplets = sample_triplets(ds.manifest, pool, e.triplets, c.seed);
  const Real acc = evaluate_triplet_accuracy(EmbeddingScorer(model, ds.inputs, pool, c.threads), triplets);
  std::ofstream out = open_out(output(c, "triplet_" + stem(e.checkpoint) + "_" + e.split + ".tsv"));
  out << "method\tsplit\ttriplets\taccuracy\n";
  char line[256];
  std::snprintf(line, sizeof line, "%s\t%s\t%zu\t%.4f\n", stem(e.checkpoint).c_str(), e.split.c_str(),
                triplets.size(), acc);
  out << line;
  std::cout << line;
}

struct RerankArgs {
  EvalArgs eval;
  std::string initial;
  std::size_t k = 10;
};

// Reranks the top-k of an initial ranking by fine-grained similarity summed over --attrs
// (the query attribute when --attrs is empty). Without --initial the candidates start shuffled.
void run_rerank(const Common& c, const RerankArgs& a) {
  const Dataset ds = load_data(a.eval.data);
  const AsenModel model = load_model(a.eval.checkpoint, ds);
  const Split split = parse_split(a.eval.split);
  const auto images = ds.manifest.indices(split);
  const RetrievalSplit rs = make_retrieval_split(ds.manifest, split);
  const EmbeddingScorer scorer(model, ds.inputs, images, c.threads);
  std::optional<EmbeddingScorer> base;
  if (!a.initial.empty()) base.emplace(load_model(a.initial, ds), ds.inputs, images, c.threads);
  const auto attrs = c.attrs.empty() ? std::vector<std::size_t>{} : attribute_indices(ds.manifest.vocabulary, c.attrs);

  Rng rng(c.seed);
  std::ofstream out = open_out(output(c, "rerank_" + stem(a.eval.checkpoint) + "_" + a.eval.split + ".tsv"));
  Real before = 0, after = 0;
  std::size_t scored = 0;
  for (const auto& q : rs.queries) {
    if (!attrs.empty() && std::find(attrs.begin(), attrs.end(), q.attribute) == attrs.end()) continue;
    const auto& cands = rs.candidates[q.attribute];
    std::vector<std::size_t> ranking;
    if (base) {
      ranking = rank_candidates(*base, q, cands, rs.image_ids).ranked;
    } else {
      for (const auto& cand : cands) ranking.push_back(cand.image);
      rng.shuffle(ranking);
    }
    const std::size_t k = std::min(a.k, ranking.size());
    const auto reranked = rerank_topk(ranking, [&](std::size_t img) {
      if (attrs.empty()) return scorer.similarity(q.image, img, q.attribute);
      Real s = 0;
      for (std::size_t at : attrs) s += scorer.similarity(q.image, img, at);
      return s;
    }, k);
    auto flags = [&](const std::vector<std::size_t>& order) {
      std::vector<std::uint8_t> f;
      for (std::size_t i = 0; i < k; ++i) f.push_back(ds.manifest.records[order[i]].value_of(q.attribute) == q.value);
      return f;
    };
    out << ds.manifest.records[q.image].image_id << '\t' << ds.manifest.vocabulary.attributes[q.attribute].name;
    for (std::size_t i = 0; i < k; ++i) out << '\t' << ds.manifest.records[reranked[i]].image_id;
    out << '\n';
    if (const auto ap = average_precision(flags(ranking))) {
      before += *ap;
      after += *average_precision(flags(reranked));
      ++scored;
    }
  }
  if (scored == 0) throw ContractError("no query has a relevant candidate in its top-" + std::to_string(a.k));
  std::printf("mean top-%zu AP over %zu queries: initial %.4f, reranked %.4f\n", a.k, scored,
              before / static_cast<Real>(scored), after / static_cast<Real>(scored));
}

struct AttentionArgs {
  EvalArgs eval;
  std::size_t limit = 16;
};

void run_export_attention(const Common& c, const AttentionArgs& a) {
  const Dataset ds = load_data(a.eval.data);
  const AsenModel model = load_model(a.eval.checkpoint, ds);
  const auto attrs = attribute_indices(ds.manifest.vocabulary, c.attrs);
  auto images = ds.manifest.indices(parse_split(a.eval.split));
  images.resize(std::min(images.size(), a.limit));
  std::vector<AttentionMap> maps;
  for (std::size_t i : images) {
    auto m = model.export_attention(ds.manifest.records[i].image_id, ds.inputs[i], attrs);
    maps.insert(maps.end(), m.begin(), m.end());
  }
  const fs::path path = output(c, "attention_" + stem(a.eval.checkpoint) + "_" + a.eval.split + ".txt");
  write_attention_file(path, maps, ds.manifest.vocabulary.names());
  std::cout << "wrote " << maps.size() << " maps to " << path.string() << '\n';
}

struct GradArgs {
  Real tolerance = 1e-4;
  Real margin = 2.0;
  bool backbone = false;
};

// Triplet loss of a small model (c=8, c'=4, r=2, d=8, n=3) on random 8x4x4 maps, or on
// random 32x32 images through the conv backbone.
void run_grad_check(const Common& c, const GradArgs& g) {
  AsenConfig cfg;
  cfg.c = 8;
  cfg.c_prime = 4;
  cfg.r = 2;
  cfg.d_embed = 8;
  cfg.n = 3;
  cfg.variant = parse_variant(c.variant);
  BackboneConfig b;
  b.out_channels = 8;
  if (!g.backbone) {
    b.kind = BackboneKind::precomputed;
    b.precomputed_spatial = 4;
  }
  AsenModel model(cfg, b, c.seed);
  Rng rng(c.seed + 1);
  const Shape shape = g.backbone ? Shape{3, 32, 32} : Shape{8, 4, 4};
  std::vector<Tensor> inputs;
  for (int i = 0; i < 3; ++i) {
    Tensor t(shape);
    for (Real& v : t.data()) v = rng.uniform(g.backbone ? 0.0 : -2.0, 1.0);
    inputs.push_back(std::move(t));
  }
  std::vector<Parameter*> params;
  for (auto& p : model.parameters()) params.push_back(&p);
  std::ofstream out = open_out(output(c, "grad_check_" + c.variant + ".tsv"));
  out << "attribute\tparameter\tmax_rel_error\tworst_coordinate\n";
  std::size_t failures = 0;
  Real worst = 0;
  for (std::size_t a = 0; a < cfg.n; ++a) {
    const std::size_t attrs[] = {a};
    LossFn loss = [&](Tape& tape) {
      Var f0 = model.feature_map(tape, inputs[0]), f1 = model.feature_map(tape, inputs[1]),
          f2 = model.feature_map(tape, inputs[2]);
      return triplet_margin_loss(model.finegrained_similarity(tape, f0, f1, attrs),
                                 model.finegrained_similarity(tape, f0, f2, attrs), g.margin);
    };
    const GradCheckReport r = grad_check(loss, params, g.tolerance);
    for (const auto& p : r.params) out << a << '\t' << p.name << '\t' << p.max_rel_error << '\t' << p.worst_coordinate << '\n';
    failures += r.failures.size();
    worst = std::max(worst, r.max_rel_error);
  }
  std::printf("max relative error %.3g over %zu parameters, %zu coordinates above %.1e\n", worst, params.size(),
              failures, g.tolerance);
  if (failures) throw NumericalError("gradient check failed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-specific embedding networks for fine-grained fashion retrieval"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file with option defaults");

  Common common;
  app.add_option("--seed", common.seed, "Random seed")->capture_default_str();
  app.add_option("--variant", common.variant, "Model variant")
      ->check(CLI::IsMember({"full", "no_asa", "no_aca", "csn", "triplet_plain"}))
      ->capture_default_str();
  app.add_option("--attrs", common.attrs, "Attribute names, comma separated")->delimiter(',');
  app.add_option("--out", common.out, "Output directory")->capture_default_str();
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render the synthetic quadrant dataset");
  gen_cmd->add_option("--images", gen.spec.images, "Image count")->check(CLI::PositiveNumber)->capture_default_str();
  gen_cmd->add_option("--size", gen.spec.image_size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--attributes", gen.spec.n_attributes, "Attributes (one per quadrant)")->check(CLI::Range(1, 4))->capture_default_str();
  gen_cmd->add_option("--values", gen.spec.values_per_attribute, "Values per attribute")->check(CLI::Range(2, 64))->capture_default_str();
  gen_cmd->add_option("--noise", gen.spec.noise, "Uniform pixel noise amplitude")->check(CLI::Range(0.0, 1.0))->capture_default_str();

  SplitArgs split;
  auto* split_cmd = app.add_subcommand("split", "Assign train/val/test splits and query/candidate roles");
  split_cmd->add_option("--manifest", split.manifest, "Manifest to split")->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--ratios", split.ratios, "train,val,test ratios")->delimiter(',')->expected(3)->capture_default_str();
  split_cmd->add_option("--query-fraction", split.query_fraction, "Query share of val and test")->check(CLI::Range(0.0, 1.0))->capture_default_str();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and keep the best validation snapshot");
  add_data_options(train_cmd, train.data);
  train_cmd->add_option("--epochs", train.train.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--triplets", train.train.triplets_per_epoch, "Triplets per epoch")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--batch", train.train.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr", train.train.learning_rate)->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--lr-decay", train.train.lr_decay, "Per-epoch multiplier")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  train_cmd->add_option("--margin", train.train.margin)->check(CLI::NonNegativeNumber)->capture_default_str();
  train_cmd->add_option("--channels", train.model.c, "Backbone output channels")->check(CLI::Range(4, 4096))->capture_default_str();
  train_cmd->add_option("--c-prime", train.model.c_prime, "Spatial attention mapping dimension")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--reduction", train.model.r, "Channel attention reduction rate")->check(CLI::PositiveNumber)->capture_default_str();
  train_cmd->add_option("--embed-dim", train.model.d_embed)->check(CLI::Range(2, 65536))->capture_default_str();
  train_cmd->add_flag("--attention-bias", train.model.attention_conv_bias, "Biases on the spatial attention convolutions");
  train_cmd->add_option("--validation", train.validation, "Model selection metric")->check(CLI::IsMember({"map", "triplet"}))->capture_default_str();

  EvalArgs eval_map, eval_triplet;
  auto* map_cmd = app.add_subcommand("eval-map", "Attribute-specific retrieval MAP");
  auto* triplet_cmd = app.add_subcommand("eval-triplet", "Triplet relation prediction accuracy");
  for (auto [cmd, e] : {std::pair{map_cmd, &eval_map}, std::pair{triplet_cmd, &eval_triplet}}) {
    add_data_options(cmd, e->data);
    cmd->add_option("--checkpoint", e->checkpoint)->required()->check(CLI::ExistingFile);
    cmd->add_option("--split", e->split)->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  }
  triplet_cmd->add_option("--triplets", eval_triplet.triplets, "Triplets to sample")->check(CLI::PositiveNumber)->capture_default_str();

  RerankArgs rerank;
  auto* rerank_cmd = app.add_subcommand("rerank", "Rerank the top-k of an initial ranking");
  add_data_options(rerank_cmd, rerank.eval.data);
  rerank_cmd->add_option("--checkpoint", rerank.eval.checkpoint, "Reranking model")->required()->check(CLI::ExistingFile);
  rerank_cmd->add_option("--initial", rerank.initial, "Model producing the initial ranking")->check(CLI::ExistingFile);
  rerank_cmd->add_option("--split", rerank.eval.split)->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  rerank_cmd->add_option("-k,--top", rerank.k, "Depth to rerank")->check(CLI::PositiveNumber)->capture_default_str();

  AttentionArgs attention;
  auto* attention_cmd = app.add_subcommand("export-attention", "Write spatial attention maps");
  add_data_options(attention_cmd, attention.eval.data);
  attention_cmd->add_option("--checkpoint", attention.eval.checkpoint)->required()->check(CLI::ExistingFile);
  attention_cmd->add_option("--split", attention.eval.split)->check(CLI::IsMember({"val", "test"}))->capture_default_str();
  attention_cmd->add_option("--limit", attention.limit, "Images to export")->check(CLI::PositiveNumber)->capture_default_str();

  GradArgs grad;
  auto* grad_cmd = app.add_subcommand("grad-check", "Compare backward gradients with finite differences");
  grad_cmd->add_option("--tolerance", grad.tolerance)->check(CLI::PositiveNumber)->capture_default_str();
  grad_cmd->add_option("--margin", grad.margin)->check(CLI::NonNegativeNumber)->capture_default_str();
  grad_cmd->add_flag("--backbone", grad.backbone, "Differentiate through the conv backbone");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  // Global options plus those of the chosen subcommand.
  const std::string active = app.get_subcommands().front()->get_name() + ".";
  std::istringstream resolved(app.config_to_str(true, false));
  std::cout << "# resolved configuration\n";
  for (std::string line; std::getline(resolved, line);) {
    const auto key = line.substr(0, line.find('='));
    if (key.find('.') == std::string::npos || key.starts_with(active)) std::cout << line << '\n';
  }
  std::cout << "# seed " << common.seed << std::endl;
  try {
    if (*gen_cmd) run_gen(common, gen);
    else if (*split_cmd) run_split(common, split);
    else if (*train_cmd) run_train(common, train);
    else if (*map_cmd) run_eval_map(common, eval_map);
    else if (*triplet_cmd) run_eval_triplet(common, eval_triplet);
    else if (*rerank_cmd) run_rerank(common, rerank);
    else if (*attention_cmd) run_export_attention(common, attention);
    else if (*grad_cmd) run_grad_check(common, grad);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return 0;
}
