#include <benchmark/benchmark.h>

#include "asen/dataset.hpp"
#include "asen/evaluation.hpp"
#include "asen/training.hpp"

using namespace asen;

namespace {

AsenConfig bench_config(Variant v = Variant::full) {
  AsenConfig cfg;
  cfg.r = 4;
  cfg.variant = v;
  return cfg;
}

Tensor random_image(Rng& rng) {
  Tensor t(Shape{3, 32, 32});
  for (Real& x : t.data()) x = rng.uniform(0, 1);
  return t;
}

void BM_Backbone(benchmark::State& state) {
  const AsenModel model(bench_config(), BackboneConfig{}, 1);
  Rng rng(2);
  const Tensor image = random_image(rng);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(model.feature_map(tape, image).value().data().data());
  }
}
BENCHMARK(BM_Backbone);

void BM_Embed(benchmark::State& state) {
  const AsenModel model(bench_config(static_cast<Variant>(state.range(0))), BackboneConfig{}, 1);
  Rng rng(2);
  const Tensor image = random_image(rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.embedding(image, 0).data().data());
  state.SetLabel(std::string(to_string(model.config().variant)));
}
BENCHMARK(BM_Embed)->Arg(static_cast<int>(Variant::full))->Arg(static_cast<int>(Variant::triplet_plain));

// Forward and backward of one triplet loss.
void BM_TripletBackward(benchmark::State& state) {
  SyntheticSpec spec;
  spec.images = 8;
  spec.seed = 3;
  const Dataset ds = generate_synthetic_dataset(spec);
  const AsenModel model(bench_config(), BackboneConfig{}, 1);
  const Triplet t{0, 1, 2, 0, 0, 1};
  for (auto _ : state) {
    Tape tape;
    Var loss = triplet_loss(tape, model, ds, t, 5.0);
    tape.backward(loss);
    benchmark::DoNotOptimize(tape.parameter_gradients().size());
  }
}
BENCHMARK(BM_TripletBackward);

class HashScorer final : public Scorer {
 public:
  Real similarity(std::size_t a, std::size_t b, std::size_t attribute) const override {
    std::uint64_t x = (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xbf58476d1ce4e5b9ULL) ^ attribute;
    x ^= x >> 31;
    x *= 0x94d049bb133111ebULL;
    return static_cast<Real>(x >> 11) * 0x1.0p-53;
  }
};

void BM_EvaluateMap(benchmark::State& state) {
  SyntheticSpec spec;
  spec.images = static_cast<std::size_t>(state.range(0));
  spec.image_size = 8;
  spec.seed = 4;
  DatasetManifest manifest = generate_synthetic_dataset(spec).manifest;
  manifest = split_dataset(manifest, {{1, 1, 8}, 0.2, 4}).manifest;
  const RetrievalSplit split = make_retrieval_split(manifest, Split::test);
  const HashScorer scorer;
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_map(scorer, split, manifest.vocabulary).overall_map);
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_EvaluateMap)->RangeMultiplier(4)->Range(256, 4096)->Complexity();

}  // namespace
BENCHMARK_MAIN();
