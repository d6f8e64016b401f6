#include "asen/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "asen/error.hpp"
#include "asen/ops.hpp"
#include "asen/parallel.hpp"
#include "asen/rng.hpp"
#include "asen/serialize.hpp"

namespace asen {

void TrainConfig::validate() const {
  if (!(margin > 0)) throw ContractError("margin must be > 0");
  if (!(lr_decay > 0 && lr_decay <= 1)) throw ContractError("lr_decay must lie in (0, 1]");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (validation_stride < 1) throw ContractError("validation_stride must be >= 1");
}

// ---------------------------------------------------------------------------
// Triplet sampling

std::vector<Triplet> sample_triplets(const DatasetManifest& manifest,
                                     std::span<const std::size_t> pool, std::size_t count,
                                     std::uint64_t seed) {
  const auto& vocab = manifest.vocabulary;
  const std::size_t n_attr = vocab.size();
  // by_value[a][v]: pool images carrying value v for attribute a.
  std::vector<std::vector<std::vector<std::size_t>>> by_value(n_attr);
  std::vector<std::vector<std::size_t>> annotated(n_attr);
  for (std::size_t a = 0; a < n_attr; ++a) by_value[a].resize(vocab.attributes[a].values.size());
  for (std::size_t img : pool) {
    for (const auto& l : manifest.records.at(img).labels) {
      by_value[l.attribute][l.value].push_back(img);
      annotated[l.attribute].push_back(img);
    }
  }

  std::vector<std::vector<std::size_t>> eligible(n_attr);
  for (std::size_t a = 0; a < n_attr; ++a) {
    std::size_t populated = 0;
    for (std::size_t v = 0; v < by_value[a].size(); ++v) {
      if (!by_value[a][v].empty()) ++populated;
      if (by_value[a][v].size() >= 2) eligible[a].push_back(v);
    }
    if (eligible[a].empty() || populated < 2) {
      throw SamplingError("attribute '" + vocab.attributes[a].name +
                          "' has no valid (positive pair, negative) combination");
    }
  }

  Rng rng(seed);
  std::vector<Triplet> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Triplet t;
    t.attribute = rng.index(n_attr);
    const auto& values = eligible[t.attribute];
    t.anchor_value = values[rng.index(values.size())];
    const auto& cls = by_value[t.attribute][t.anchor_value];
    const std::size_t ai = rng.index(cls.size());
    std::size_t pi = rng.index(cls.size() - 1);
    if (pi >= ai) ++pi;
    t.anchor = cls[ai];
    t.positive = cls[pi];
    const auto& all = annotated[t.attribute];
    do {
      t.negative = all[rng.index(all.size())];
      t.negative_value = *manifest.records[t.negative].value_of(t.attribute);
    } while (t.negative_value == t.anchor_value);
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss and optimiser

Real triplet_margin_loss(Real s_pos, Real s_neg, Real margin) {
  return std::max(0.0, margin - s_pos + s_neg);
}

Var triplet_margin_loss(Var s_pos, Var s_neg, Real margin) {
  const Real value = triplet_margin_loss(s_pos.item(), s_neg.item(), margin);
  const bool active = value > 0;
  return s_pos.tape()->record(
      Tensor::scalar(value), {s_pos, s_neg},
      [active](const Tensor& g, std::span<Tensor* const> pg) {
        if (!active) return;
        if (pg[0]) (*pg[0])[0] -= g[0];
        if (pg[1]) (*pg[1])[0] += g[0];
      },
      "triplet_margin_loss");
}

void adam_step(ParameterSet& params, std::span<const Tensor> grads, OptimizerState& state,
               Real lr, const TrainConfig& config) {
  if (grads.size() != params.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(Tensor::zeros_like(p.value));
      state.second_moment.push_back(Tensor::zeros_like(p.value));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match the parameter set");
  }
  ++state.step;
  const Real t = static_cast<Real>(state.step);
  const Real correct1 = 1.0 - std::pow(config.beta1, t);
  const Real correct2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable || grads[i].empty()) {
      continue;
    }
    if (grads[i].shape() != p.value.shape() || state.first_moment[i].shape() != p.value.shape()) {
      throw ContractError("adam_step: gradient of '" + p.name + "' has shape " +
                          shape_string(grads[i].shape()) + ", parameter has " +
                          shape_string(p.value.shape()));
    }
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const Real g = grads[i][k];
      m[k] = config.beta1 * m[k] + (1 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1 - config.beta2) * g * g;
      const Real m_hat = m[k] / correct1;
      const Real v_hat = v[k] / correct2;
      p.value[k] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

Real lr_schedule(std::size_t epoch, Real base_lr, Real decay) {
  return base_lr * std::pow(decay, static_cast<Real>(epoch));
}

// ---------------------------------------------------------------------------
// Epoch loop

Var triplet_loss(Tape& tape, const AsenModel& model, const Dataset& data, const Triplet& t,
                 Real margin) {
  Var anchor = model.embed(tape, model.feature_map(tape, data.inputs.at(t.anchor)), t.attribute);
  Var positive =
      model.embed(tape, model.feature_map(tape, data.inputs.at(t.positive)), t.attribute);
  Var negative =
      model.embed(tape, model.feature_map(tape, data.inputs.at(t.negative)), t.attribute);
  return triplet_margin_loss(ops::cosine_similarity(anchor, positive),
                             ops::cosine_similarity(anchor, negative), margin);
}

Real train_epoch(AsenModel& model, const Dataset& data, std::span<const Triplet> triplets,
                 const TrainConfig& config, OptimizerState& state, Real lr) {
  config.validate();
  ParameterSet& params = model.parameters();
  const std::size_t n_params = params.size();
  Real epoch_loss = 0;

  // Per-triplet gradient slots, reduced in triplet order so the result is independent of
  // the thread count.
  std::vector<std::vector<Tensor>> slots(config.batch_size);
  std::vector<Real> losses(config.batch_size);
  std::vector<Tensor> batch_grad(n_params);

  for (std::size_t begin = 0, batch = 0; begin < triplets.size();
       begin += config.batch_size, ++batch) {
    const std::size_t size = std::min(config.batch_size, triplets.size() - begin);
    parallel_for(size, config.threads, [&](std::size_t k) {
      const Triplet& t = triplets[begin + k];
      auto& slot = slots[k];
      slot.assign(n_params, Tensor());
      try {
        Tape tape;
        Var loss = triplet_loss(tape, model, data, t, config.margin);
        losses[k] = loss.item();
        tape.backward(loss);
        for (auto [param, g] : tape.parameter_gradients()) slot[param->index] = *g;
      } catch (const NumericalError& e) {
        const auto& recs = data.manifest.records;
        throw NumericalError(std::string(e.what()) + " (batch " + std::to_string(batch) +
                             ", triplet " + recs[t.anchor].image_id + " " +
                             recs[t.positive].image_id + " " + recs[t.negative].image_id + ")");
      }
    });

    for (std::size_t i = 0; i < n_params; ++i) batch_grad[i] = Tensor::zeros_like(params[i].value);
    Real batch_loss = 0;
    for (std::size_t k = 0; k < size; ++k) {
      batch_loss += losses[k];
      for (std::size_t i = 0; i < n_params; ++i) {
        if (!slots[k][i].empty()) batch_grad[i].add_(slots[k][i]);
      }
    }
    const Real scale = 1.0 / static_cast<Real>(size);
    for (auto& g : batch_grad) {
      for (Real& v : g.data()) v *= scale;
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericalError("non-finite loss in batch " + std::to_string(batch));
    }
    epoch_loss += batch_loss;
    adam_step(params, batch_grad, state, lr, config);
  }
  return triplets.empty() ? 0.0 : epoch_loss / static_cast<Real>(triplets.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::string canonical_config(const AsenConfig& m, const BackboneConfig& b) {
  std::ostringstream ss;
  ss << "variant " << to_string(m.variant) << '\n'
     << "c " << m.c << '\n'
     << "c_prime " << m.c_prime << '\n'
     << "r " << m.r << '\n'
     << "d_embed " << m.d_embed << '\n'
     << "n " << m.n << '\n'
     << "attention_conv_bias " << (m.attention_conv_bias ? 1 : 0) << '\n'
     << "backbone " << (b.kind == BackboneKind::tiny_conv ? "tiny_conv" : "precomputed") << '\n'
     << "image_size " << b.image_size << '\n'
     << "image_channels " << b.image_channels << '\n'
     << "stage_widths";
  for (std::size_t w : b.stage_widths) ss << ' ' << w;
  ss << '\n'
     << "out_channels " << b.out_channels << '\n'
     << "precomputed_spatial " << b.precomputed_spatial << '\n';
  return ss.str();
}

std::string format_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string config_hash(const AsenConfig& model, const BackboneConfig& backbone,
                        const TrainConfig& train) {
  std::string text = canonical_config(model, backbone);
  text += "margin " + format_real(train.margin) + "\nlr " + format_real(train.learning_rate) +
          "\ndecay " + format_real(train.lr_decay) + "\nepochs " + std::to_string(train.epochs) +
          "\ntriplets " + std::to_string(train.triplets_per_epoch) + "\nbatch " +
          std::to_string(train.batch_size) + "\nseed " + std::to_string(train.seed) + "\n";
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Checkpoint snapshot(const AsenModel& model, std::size_t epoch, Real metric,
                    const std::string& hash) {
  Checkpoint cp{model.config(), model.backbone_config(), {}, epoch, metric, hash};
  for (const auto& p : model.parameters()) cp.params.push_back({p.name, p.value});
  return cp;
}

void restore(AsenModel& model, const Checkpoint& checkpoint) {
  ParameterSet& params = model.parameters();
  if (checkpoint.params.size() != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(checkpoint.params.size()) +
                      " tensors, model has " + std::to_string(params.size()) + " parameters");
  }
  for (const auto& nt : checkpoint.params) {
    Parameter& p = params.at(nt.name);
    if (p.value.shape() != nt.value.shape()) {
      throw FormatError("checkpoint tensor '" + nt.name + "' has shape " +
                        shape_string(nt.value.shape()) + ", model expects " +
                        shape_string(p.value.shape()));
    }
    p.value = nt.value;
  }
}

AsenModel model_from_checkpoint(const Checkpoint& checkpoint) {
  AsenModel model(checkpoint.model, checkpoint.backbone, 0);
  restore(model, checkpoint);
  return model;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "asen-checkpoint 1\n"
      << "config_hash " << cp.config_hash << '\n'
      << "epoch " << cp.epoch << '\n'
      << "metric " << format_real(cp.metric) << '\n'
      << canonical_config(cp.model, cp.backbone) << "tensors " << cp.params.size() << '\n'
      << "end\n";
  for (const auto& nt : cp.params) {
    write_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    write_tensor(out, nt.value);
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::map<std::string, std::string> header;
  std::uint64_t offset = 0;
  std::string line;
  if (!std::getline(in, line) || line != "asen-checkpoint 1") {
    throw FormatError(path.string() + ": not an asen checkpoint");
  }
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    offset += line.size() + 1;
    if (line == "end") break;
    const auto space = line.find(' ');
    if (space == std::string::npos) throw FormatError(path.string() + ": bad header line '" + line + "'");
    header[line.substr(0, space)] = line.substr(space + 1);
  }
  const auto get = [&](const std::string& key) -> const std::string& {
    auto it = header.find(key);
    if (it == header.end()) throw FormatError(path.string() + ": header lacks '" + key + "'");
    return it->second;
  };

  Checkpoint cp;
  cp.config_hash = get("config_hash");
  cp.epoch = std::stoul(get("epoch"));
  cp.metric = std::stod(get("metric"));
  cp.model.variant = parse_variant(get("variant"));
  cp.model.c = std::stoul(get("c"));
  cp.model.c_prime = std::stoul(get("c_prime"));
  cp.model.r = std::stoul(get("r"));
  cp.model.d_embed = std::stoul(get("d_embed"));
  cp.model.n = std::stoul(get("n"));
  cp.model.attention_conv_bias = get("attention_conv_bias") == "1";
  cp.backbone.kind =
      get("backbone") == "tiny_conv" ? BackboneKind::tiny_conv : BackboneKind::precomputed;
  cp.backbone.image_size = std::stoul(get("image_size"));
  cp.backbone.image_channels = std::stoul(get("image_channels"));
  cp.backbone.stage_widths.clear();
  std::istringstream widths(get("stage_widths"));
  for (std::size_t w; widths >> w;) cp.backbone.stage_widths.push_back(w);
  cp.backbone.out_channels = std::stoul(get("out_channels"));
  cp.backbone.precomputed_spatial = std::stoul(get("precomputed_spatial"));

  const std::size_t count = std::stoul(get("tensors"));
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t len = read_u32(in, offset);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (static_cast<std::uint32_t>(in.gcount()) != len) {
      throw FormatError(path.string() + ": truncated tensor name at byte " + std::to_string(offset));
    }
    offset += len;
    cp.params.push_back({std::move(name), read_tensor(in, offset)});
  }
  return cp;
}

// ---------------------------------------------------------------------------
// Model selection

std::size_t best_epoch(std::span<const std::optional<Real>> metrics) {
  std::size_t best = 0;
  std::optional<Real> best_metric;
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (metrics[i] && (!best_metric || *metrics[i] > *best_metric)) {
      best_metric = metrics[i];
      best = i + 1;
    }
  }
  return best;
}

FitResult fit(AsenModel& model, const Dataset& data, const TrainConfig& config,
              const Validator& validate, std::ostream* log) {
  config.validate();
  if (!validate) throw ContractError("fit requires a validation metric");
  if (!data.manifest.is_split()) throw ContractError("fit requires a split dataset");
  if (data.manifest.indices(Split::val).empty()) throw ContractError("validation split is empty");
  if (config.epochs < 1) throw ContractError("fit requires at least one epoch");
  const std::vector<std::size_t> pool = data.manifest.indices(Split::train);
  const std::string hash = config_hash(model.config(), model.backbone_config(), config);

  FitResult result;
  OptimizerState state;
  std::optional<Real> best_metric;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const Real lr = lr_schedule(epoch - 1, config.learning_rate, config.lr_decay);
    const auto triplets =
        sample_triplets(data.manifest, pool, config.triplets_per_epoch, config.seed ^ epoch);
    EpochLog entry{epoch, train_epoch(model, data, triplets, config, state, lr), lr, std::nullopt};
    if (epoch % config.validation_stride == 0 || epoch == config.epochs) {
      entry.metric = validate(model);
      if (!best_metric || *entry.metric > *best_metric) {
        best_metric = entry.metric;
        result.best = snapshot(model, epoch, *entry.metric, hash);
      }
    }
    if (log) {
      *log << entry.epoch << '\t' << format_real(entry.mean_loss) << '\t' << format_real(lr)
           << '\t' << (entry.metric ? format_real(*entry.metric) : std::string("-")) << '\n';
      log->flush();
    }
    result.history.push_back(entry);
  }
  restore(model, result.best);
  return result;
}

}  // namespace asen
