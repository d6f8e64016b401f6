#include "asen/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <ostream>

#include "asen/error.hpp"
#include "asen/ops.hpp"
#include "asen/parallel.hpp"

namespace asen {

RetrievalSplit make_retrieval_split(const DatasetManifest& manifest, Split split) {
  if (!manifest.is_split()) throw ContractError("manifest has no split assignment");
  RetrievalSplit out;
  out.candidates.resize(manifest.vocabulary.size());
  for (const auto& r : manifest.records) out.image_ids.push_back(r.image_id);
  for (std::size_t i : manifest.indices(split, Role::candidate)) {
    for (const auto& l : manifest.records[i].labels) out.candidates[l.attribute].push_back({i, l.value});
  }
  for (std::size_t i : manifest.indices(split, Role::query)) {
    for (const auto& l : manifest.records[i].labels) out.queries.push_back({i, l.attribute, l.value});
  }
  return out;
}

// ---------------------------------------------------------------------------

EmbeddingScorer::EmbeddingScorer(const AsenModel& model, std::span<const Tensor> inputs,
                                 std::span<const std::size_t> images, std::size_t threads)
    : n_attributes_(model.config().n) {
  for (std::size_t i = 0; i < images.size(); ++i) slots_.emplace(images[i], i);
  embeddings_.resize(images.size() * n_attributes_);
  norms_.resize(embeddings_.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    Tape tape;
    Var features = model.feature_map(tape, inputs[images[i]]);
    for (std::size_t a = 0; a < n_attributes_; ++a) {
      Tensor e = model.embed(tape, features, a).value();
      Real sq = 0;
      for (Real v : e.data()) sq += v * v;
      norms_[i * n_attributes_ + a] = std::sqrt(sq);
      embeddings_[i * n_attributes_ + a] = std::move(e);
    }
  });
}

std::size_t EmbeddingScorer::slot(std::size_t image) const {
  auto it = slots_.find(image);
  if (it == slots_.end()) {
    throw ContractError("image " + std::to_string(image) + " was not embedded");
  }
  return it->second;
}

const Tensor& EmbeddingScorer::embedding(std::size_t image, std::size_t attribute) const {
  if (attribute >= n_attributes_) {
    throw VocabularyError("attribute index " + std::to_string(attribute) + " out of range");
  }
  return embeddings_[slot(image) * n_attributes_ + attribute];
}

Real EmbeddingScorer::similarity(std::size_t a, std::size_t b, std::size_t attribute) const {
  const Tensor& u = embedding(a, attribute);
  const Tensor& v = embedding(b, attribute);
  const Real nu = norms_[slot(a) * n_attributes_ + attribute];
  const Real nv = norms_[slot(b) * n_attributes_ + attribute];
  if (nu < ops::kDegenerateNorm || nv < ops::kDegenerateNorm) {
    throw DegenerateVectorError("zero-norm embedding during scoring");
  }
  Real dot = 0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  return dot / (nu * nv);
}

// ---------------------------------------------------------------------------

RankingResult rank_candidates(const Scorer& scorer, const RetrievalQuery& query,
                              std::span<const RetrievalCandidate> candidates,
                              std::span<const std::string> image_ids) {
  std::vector<std::pair<Real, const RetrievalCandidate*>> scored;
  scored.reserve(candidates.size());
  for (const auto& c : candidates) {
    scored.emplace_back(scorer.similarity(query.image, c.image, query.attribute), &c);
  }
  std::sort(scored.begin(), scored.end(), [&](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return image_ids[x.second->image] < image_ids[y.second->image];
  });
  RankingResult r{query, {}, {}, {}};
  for (const auto& [s, c] : scored) {
    r.ranked.push_back(c->image);
    r.scores.push_back(s);
    r.relevant.push_back(c->value == query.value ? 1 : 0);
  }
  return r;
}

std::optional<Real> average_precision(std::span<const std::uint8_t> relevance) {
  std::size_t hits = 0;
  Real total = 0;
  for (std::size_t k = 0; k < relevance.size(); ++k) {
    if (relevance[k]) {
      ++hits;
      total += static_cast<Real>(hits) / static_cast<Real>(k + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return total / static_cast<Real>(hits);
}

Real expected_random_average_precision(std::size_t relevant, std::size_t total) {
  if (relevant == 0 || total == 0 || relevant > total) {
    throw ContractError("random AP needs 0 < relevant <= total");
  }
  if (total == 1) return 1.0;
  // A relevant item sits at rank k with probability 1/N; the k-1 items above it hold
  // (k-1)(R-1)/(N-1) relevant ones in expectation.
  const Real n = static_cast<Real>(total), r = static_cast<Real>(relevant);
  Real harmonic = 0;
  for (std::size_t k = 1; k <= total; ++k) harmonic += 1.0 / static_cast<Real>(k);
  return (harmonic + (r - 1) / (n - 1) * (n - harmonic)) / n;
}

namespace {

EvalReport aggregate(const AttributeVocabulary& vocabulary,
                     const std::vector<RetrievalQuery>& queries,
                     const std::vector<std::optional<Real>>& ap) {
  EvalReport report;
  report.attribute_names = vocabulary.names();
  report.queries = queries.size();
  std::vector<Real> sums(vocabulary.size(), 0.0);
  std::vector<std::size_t> counts(vocabulary.size(), 0);
  Real total = 0;
  std::size_t scored = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!ap[q]) {
      ++report.excluded_queries;
      continue;
    }
    sums[queries[q].attribute] += *ap[q];
    ++counts[queries[q].attribute];
    total += *ap[q];
    ++scored;
  }
  for (std::size_t a = 0; a < vocabulary.size(); ++a) {
    report.attribute_map.push_back(counts[a] ? std::optional<Real>(sums[a] / static_cast<Real>(counts[a]))
                                             : std::nullopt);
  }
  report.overall_map = scored ? total / static_cast<Real>(scored) : 0.0;
  return report;
}

}  // namespace

EvalReport evaluate_map(const Scorer& scorer, const RetrievalSplit& split,
                        const AttributeVocabulary& vocabulary) {
  if (split.queries.empty()) throw ContractError("retrieval split has no queries");
  std::vector<std::optional<Real>> ap(split.queries.size());
  for (std::size_t q = 0; q < split.queries.size(); ++q) {
    const auto& query = split.queries[q];
    const auto& cands = split.candidates.at(query.attribute);
    if (cands.empty()) {
      throw ContractError("attribute '" + vocabulary.attributes.at(query.attribute).name +
                          "' has no candidates");
    }
    ap[q] = average_precision(rank_candidates(scorer, query, cands, split.image_ids).relevant);
  }
  return aggregate(vocabulary, split.queries, ap);
}

Real random_baseline_map(const RetrievalSplit& split, const AttributeVocabulary& vocabulary) {
  std::vector<std::optional<Real>> ap(split.queries.size());
  for (std::size_t q = 0; q < split.queries.size(); ++q) {
    const auto& query = split.queries[q];
    const auto& cands = split.candidates.at(query.attribute);
    const auto relevant = static_cast<std::size_t>(std::count_if(
        cands.begin(), cands.end(), [&](const auto& c) { return c.value == query.value; }));
    if (relevant > 0) ap[q] = expected_random_average_precision(relevant, cands.size());
  }
  return aggregate(vocabulary, split.queries, ap).overall_map;
}

Real evaluate_triplet_accuracy(const Scorer& scorer, std::span<const Triplet> triplets) {
  if (triplets.empty()) throw ContractError("no triplets to evaluate");
  std::size_t correct = 0;
  for (const auto& t : triplets) {
    if (scorer.similarity(t.anchor, t.positive, t.attribute) >
        scorer.similarity(t.anchor, t.negative, t.attribute)) {
      ++correct;
    }
  }
  return static_cast<Real>(correct) / static_cast<Real>(triplets.size());
}

std::vector<std::size_t> rerank_topk(std::span<const std::size_t> ranking,
                                     const std::function<Real(std::size_t)>& score,
                                     std::size_t k) {
  if (k > ranking.size()) {
    throw ContractError("rerank depth " + std::to_string(k) + " exceeds ranking length " +
                        std::to_string(ranking.size()));
  }
  std::vector<std::pair<Real, std::size_t>> head;
  for (std::size_t i = 0; i < k; ++i) head.emplace_back(score(ranking[i]), ranking[i]);
  std::stable_sort(head.begin(), head.end(),
                   [](const auto& x, const auto& y) { return x.first > y.first; });
  std::vector<std::size_t> out(ranking.begin(), ranking.end());
  for (std::size_t i = 0; i < k; ++i) out[i] = head[i].second;
  return out;
}

void write_report(std::ostream& out, std::span<const EvalReport> reports) {
  if (reports.empty()) return;
  out << "method";
  for (const auto& name : reports.front().attribute_names) out << '\t' << name;
  out << "\toverall\n";
  char buf[32];
  for (const auto& r : reports) {
    out << r.variant;
    for (const auto& m : r.attribute_map) {
      if (m) {
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *m);
        out << '\t' << buf;
      } else {
        out << "\t-";
      }
    }
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * r.overall_map);
    out << '\t' << buf << '\n';
  }
}

Validator map_validator(const Dataset& data, Split split, std::size_t threads) {
  auto rs = std::make_shared<RetrievalSplit>(make_retrieval_split(data.manifest, split));
  if (rs->queries.empty()) throw ContractError("validation split has no queries");
  auto images = std::make_shared<std::vector<std::size_t>>(data.manifest.indices(split));
  return [&data, rs, images, threads](const AsenModel& model) {
    EmbeddingScorer scorer(model, data.inputs, *images, threads);
    return evaluate_map(scorer, *rs, data.manifest.vocabulary).overall_map;
  };
}

Validator triplet_accuracy_validator(const Dataset& data, std::vector<Triplet> triplets,
                                     std::size_t threads) {
  if (triplets.empty()) throw ContractError("validation triplet set is empty");
  auto ts = std::make_shared<std::vector<Triplet>>(std::move(triplets));
  std::vector<std::size_t> imgs;
  for (const auto& t : *ts) imgs.insert(imgs.end(), {t.anchor, t.positive, t.negative});
  std::sort(imgs.begin(), imgs.end());
  imgs.erase(std::unique(imgs.begin(), imgs.end()), imgs.end());
  auto images = std::make_shared<std::vector<std::size_t>>(std::move(imgs));
  return [&data, ts, images, threads](const AsenModel& model) {
    EmbeddingScorer scorer(model, data.inputs, *images, threads);
    return evaluate_triplet_accuracy(scorer, *ts);
  };
}

}  // namespace asen
