#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "asen/dataset.hpp"
#include "asen/model.hpp"
#include "asen/training.hpp"

namespace asen {

struct RetrievalQuery {
  std::size_t image = 0;
  std::size_t attribute = 0;
  std::size_t value = 0;
};

struct RetrievalCandidate {
  std::size_t image = 0;
  std::size_t value = 0;
};

struct RetrievalSplit {
  std::vector<RetrievalQuery> queries;
  // candidates[a]: candidate images annotated for attribute a.
  std::vector<std::vector<RetrievalCandidate>> candidates;
  // Ids of every manifest record, used for deterministic tie-breaking.
  std::vector<std::string> image_ids;
};

/// One query per (query image, annotated attribute) of the split.
RetrievalSplit make_retrieval_split(const DatasetManifest& manifest, Split split);

/// Similarity of two images (record indices) in the space of one attribute.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual Real similarity(std::size_t a, std::size_t b, std::size_t attribute) const = 0;
};

/// Precomputes every attribute-specific embedding of the given images, then scores by cosine.
class EmbeddingScorer final : public Scorer {
 public:
  EmbeddingScorer(const AsenModel& model, std::span<const Tensor> inputs,
                  std::span<const std::size_t> images, std::size_t threads = 1);

  Real similarity(std::size_t a, std::size_t b, std::size_t attribute) const override;
  const Tensor& embedding(std::size_t image, std::size_t attribute) const;

 private:
  std::size_t slot(std::size_t image) const;

  std::size_t n_attributes_;
  std::unordered_map<std::size_t, std::size_t> slots_;
  std::vector<Tensor> embeddings_;  // slot * n_attributes + attribute
  std::vector<Real> norms_;
};

struct RankingResult {
  RetrievalQuery query;
  std::vector<std::size_t> ranked;  // candidate images, best first
  std::vector<Real> scores;
  std::vector<std::uint8_t> relevant;
};

/// Sorts by descending similarity, ties by ascending image id.
RankingResult rank_candidates(const Scorer& scorer, const RetrievalQuery& query,
                              std::span<const RetrievalCandidate> candidates,
                              std::span<const std::string> image_ids);

/// Mean of precision@k over the relevant ranks; nullopt when nothing is relevant.
std::optional<Real> average_precision(std::span<const std::uint8_t> relevance);

/// Expected AP of a uniformly random ordering of `total` items, `relevant` of them relevant.
Real expected_random_average_precision(std::size_t relevant, std::size_t total);

struct EvalReport {
  std::string variant;
  std::string checkpoint_hash;
  std::vector<std::string> attribute_names;
  std::vector<std::optional<Real>> attribute_map;  // nullopt: no scored query
  Real overall_map = 0;                            // mean AP over scored queries
  std::size_t queries = 0;
  std::size_t excluded_queries = 0;
  std::optional<Real> triplet_accuracy;
};

EvalReport evaluate_map(const Scorer& scorer, const RetrievalSplit& split,
                        const AttributeVocabulary& vocabulary);

/// Analytic MAP of a random ranking on this split, aggregated like evaluate_map.
Real random_baseline_map(const RetrievalSplit& split, const AttributeVocabulary& vocabulary);

/// Fraction of triplets with sim(anchor, positive) > sim(anchor, negative); ties are wrong.
Real evaluate_triplet_accuracy(const Scorer& scorer, std::span<const Triplet> triplets);

/// Stable re-sort of the first k entries by descending score; the tail is untouched.
std::vector<std::size_t> rerank_topk(std::span<const std::size_t> ranking,
                                     const std::function<Real(std::size_t)>& score,
                                     std::size_t k = 10);

/// Tab-separated table: "method", attribute names, "overall"; values in percent, 2 decimals.
void write_report(std::ostream& out, std::span<const EvalReport> reports);

/// Overall MAP on one split of `data`, for model selection.
Validator map_validator(const Dataset& data, Split split, std::size_t threads = 1);
Validator triplet_accuracy_validator(const Dataset& data, std::vector<Triplet> triplets,
                                     std::size_t threads = 1);

}  // namespace asen
