#include <doctest.h>

#include "support.hpp"
#include "polyvit/model.hpp"

#include <set>

using namespace testsupport;
using polyvit::HeadInit;
using polyvit::LossKind;
using polyvit::Modality;
using polyvit::ModalityGeometry;
using polyvit::ModelConfig;
using polyvit::TaskSpec;

namespace {
TaskSpec make_task(int id, const std::string& name, Modality mod, std::size_t classes) {
  TaskSpec t;
  t.id = id;
  t.name = name;
  t.modality = mod;
  t.num_classes = classes;
  return t;
}

// Geometries mirroring the published co-training setup: images at 384 with
// 16x16 patches, 32-frame video at 224 with 4x16x16 tubelets, 800x128
// spectrograms with 16x16 patches.
polyvit::ModelLayout base9_layout() {
  polyvit::ModelLayout layout;
  layout.layers = 12;
  layout.width = 768;
  layout.layers_adapt = 0;
  layout.modalities = {
      {Modality::image, {384, 384, 3}, {16, 16}, false},
      {Modality::video, {32, 224, 224, 3}, {4, 16, 16}, false},
      {Modality::audio, {800, 128, 1}, {16, 16}, false},
  };
  const std::vector<std::pair<Modality, std::size_t>> tasks = {
      {Modality::image, 100}, {Modality::image, 10},  {Modality::image, 37},
      {Modality::image, 45},  {Modality::image, 1000}, {Modality::video, 400},
      {Modality::video, 339}, {Modality::audio, 527}, {Modality::audio, 309},
  };
  int id = 0;
  for (const auto& [mod, classes] : tasks) layout.tasks.push_back({id++, mod, classes});
  return layout;
}

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.layers = 3;
  cfg.width = 8;
  cfg.n_heads = 2;
  cfg.layers_adapt = 1;
  cfg.modalities = {{Modality::image, {4, 4, 1}, {2, 2}, false},
                    {Modality::audio, {4, 2, 1}, {2, 2}, false}};
  cfg.tasks = {make_task(0, "img", Modality::image, 3),
               make_task(1, "aud", Modality::audio, 4)};
  return cfg;
}
}  // namespace

TEST_CASE("base configuration parameter counts hit the published scale") {
  const auto counts = polyvit::param_count(base9_layout());
  // Frozen closed-form values: 12 layers of 12d^2+13d at d=768 plus
  // tokenizers, final LN, and 2767 head rows.
  CHECK(counts.total == 92287951ull);
  CHECK(counts.fleet_total == 780941263ull);
  CHECK(std::abs(double(counts.total) - 93e6) / 93e6 < 0.05);
  CHECK(std::abs(double(counts.fleet_total) - 773e6) / 773e6 < 0.05);
  CHECK(counts.fleet_ratio > 7.9);
  CHECK(counts.fleet_ratio < 8.7);
}

TEST_CASE("analytic count equals exhaustive tensor enumeration") {
  auto model = polyvit::build_polyvit<float>(toy_config(), 1);
  unsigned long long walked = 0;
  std::size_t tensors = 0;
  polyvit::visit_params(model, [&](const std::string&, polyvit::Tensor<float>& t) {
    walked += t.numel();
    ++tensors;
  });
  const auto counts = polyvit::param_count(model);
  CHECK(counts.total == walked);
  CHECK(tensors > 0);
  unsigned long long parts = counts.shared;
  for (const auto& [mod, n] : counts.per_modality) parts += n;
  for (const auto& [id, n] : counts.per_task) parts += n;
  CHECK(parts == counts.total);
}

TEST_CASE("removing a task removes exactly head-sized parameters") {
  ModelConfig cfg = toy_config();
  const auto with = polyvit::param_count(
      polyvit::layout_of(polyvit::build_polyvit<float>(cfg, 1)));
  cfg.tasks.pop_back();  // drops the C=4 audio task head
  const auto without = polyvit::param_count(
      polyvit::layout_of(polyvit::build_polyvit<float>(cfg, 1)));
  CHECK(with.total - without.total == 4 * (8 + 1));
}

TEST_CASE("zero initialized heads give zero logits and log C loss") {
  auto cfg = toy_config();
  cfg.tasks[0].num_classes = 10;
  auto model = polyvit::build_polyvit<double>(cfg, 3);
  Rng rng(4);
  auto raw = random_tensor({4, 4, 1}, rng);
  EvalContext<double> ctx;
  const auto logits = polyvit::forward_logits(ctx, model, raw, 0);
  for (std::size_t j = 0; j < 10; ++j) CHECK(logits[j] == 0.0);
  std::vector<double> onehot(10, 0.0);
  onehot[7] = 1.0;
  polyvit::Example<double> ex{raw, Tensor<double>({10}, onehot)};
  const auto loss = polyvit::example_loss(ctx, model, ex, 0);
  CHECK(loss[0] == doctest::Approx(2.302585).epsilon(1e-5));
}

TEST_CASE("two tasks on one modality share the trunk but not the head") {
  ModelConfig cfg = toy_config();
  cfg.tasks = {make_task(0, "a", Modality::image, 3),
               make_task(1, "b", Modality::image, 5)};
  cfg.tasks[1].head_init = HeadInit::lecun_normal;
  auto model = polyvit::build_polyvit<double>(cfg, 5);
  Rng rng(6);
  auto raw = random_tensor({4, 4, 1}, rng);
  EvalContext<double> ctx;
  const auto f = polyvit::forward_features(ctx, model, raw, Modality::image);
  const auto g = polyvit::forward_features(ctx, model, raw, Modality::image);
  CHECK(polyvit::same_values(f, g));
  const auto l0 = polyvit::forward_logits(ctx, model, raw, 0);
  const auto l1 = polyvit::forward_logits(ctx, model, raw, 1);
  CHECK(l0.numel() == 3);
  CHECK(l1.numel() == 5);
}

TEST_CASE("same seed builds identical models, different seeds differ") {
  auto a = polyvit::build_polyvit<float>(toy_config(), 7);
  auto b = polyvit::build_polyvit<float>(toy_config(), 7);
  auto c = polyvit::build_polyvit<float>(toy_config(), 8);
  bool all_same_ab = true, any_diff_ac = false;
  polyvit::visit_params(a, [&](const std::string& name, polyvit::Tensor<float>& t) {
    all_same_ab = all_same_ab && polyvit::same_values(t, *polyvit::find_param(b, name));
    any_diff_ac = any_diff_ac || !polyvit::same_values(t, *polyvit::find_param(c, name));
  });
  CHECK(all_same_ab);
  CHECK(any_diff_ac);
}

TEST_CASE("batch loss equals the mean of single example losses") {
  auto cfg = toy_config();
  cfg.tasks[0].head_init = HeadInit::lecun_normal;
  auto model = polyvit::build_polyvit<double>(cfg, 9);
  Rng rng(10);
  std::vector<polyvit::Example<double>> batch;
  for (int i = 0; i < 3; ++i) {
    std::vector<double> onehot(3, 0.0);
    onehot[i] = 1.0;
    batch.push_back({random_tensor({4, 4, 1}, rng), Tensor<double>({3}, onehot)});
  }
  EvalContext<double> ctx;
  const auto total = polyvit::batch_loss(ctx, model, batch, 0);
  double mean = 0;
  for (const auto& ex : batch) mean += polyvit::example_loss(ctx, model, ex, 0)[0];
  mean /= 3;
  CHECK(total[0] == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("config validation names the broken reference") {
  ModelConfig cfg = toy_config();
  cfg.tasks.push_back(make_task(2, "vid", Modality::video, 4));
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("vid"),
                       std::invalid_argument);
  cfg = toy_config();
  cfg.tasks[1].id = 0;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("duplicate task id"),
                       std::invalid_argument);
  cfg = toy_config();
  cfg.layers_adapt = 5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("forward rejects inputs of the wrong geometry") {
  auto model = polyvit::build_polyvit<double>(toy_config(), 11);
  EvalContext<double> ctx;
  CHECK_THROWS_AS(
      polyvit::forward_logits(ctx, model, polyvit::Tensor<double>::zeros({6, 6, 1}), 0),
      std::invalid_argument);
  CHECK_THROWS_AS(
      polyvit::forward_logits(ctx, model, polyvit::Tensor<double>::zeros({4, 4, 1}), 9),
      std::invalid_argument);
}

TEST_CASE("canonical parameter names are unique") {
  auto model = polyvit::build_polyvit<float>(toy_config(), 12);
  std::set<std::string> names;
  std::size_t count = 0;
  polyvit::visit_params(model, [&](const std::string& n, polyvit::Tensor<float>&) {
    names.insert(n);
    ++count;
  });
  CHECK(names.size() == count);
  CHECK(names.count("image.tokenizer.E") == 1);
  CHECK(names.count("image.adapter0.msa.h0.q_w") == 1);
  CHECK(names.count("shared.layer0.mlp.fc1_w") == 1);
  CHECK(names.count("final_ln.gamma") == 1);
  CHECK(names.count("task1.head.w") == 1);
}
