#include "bdnp/poison.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace bdnp {

namespace {

const char* corner_name(Corner c) {
  switch (c) {
    case Corner::kBottomRight: return "bottom-right";
    case Corner::kBottomLeft: return "bottom-left";
    case Corner::kTopRight: return "top-right";
    case Corner::kTopLeft: return "top-left";
  }
  return "bottom-right";
}

Corner corner_from(const std::string& s) {
  if (s == "bottom-right") return Corner::kBottomRight;
  if (s == "bottom-left") return Corner::kBottomLeft;
  if (s == "top-right") return Corner::kTopRight;
  if (s == "top-left") return Corner::kTopLeft;
  throw DataError("unknown trigger corner '" + s + "'");
}

void apply_patch(double* image, Index channels, Index height, Index width, const TriggerSpec& t) {
  const Index s = t.patch_size;
  const bool bottom = t.corner == Corner::kBottomRight || t.corner == Corner::kBottomLeft;
  const bool right = t.corner == Corner::kBottomRight || t.corner == Corner::kTopRight;
  const Index row0 = bottom ? height - s : 0;
  const Index col0 = right ? width - s : 0;
  for (Index c = 0; c < channels; ++c) {
    for (Index y = row0; y < row0 + s; ++y) {
      for (Index x = col0; x < col0 + s; ++x) image[(c * height + y) * width + x] = t.value;
    }
  }
}

void apply_blend(double* image, const Tensor<double>& pattern, double alpha) {
  for (Index i = 0; i < pattern.size(); ++i) image[i] = (1.0 - alpha) * image[i] + alpha * pattern[i];
}

}  // namespace

void TriggerSpec::validate(Index height, Index width) const {
  if (kind == TriggerKind::kPatch) {
    if (patch_size < 1 || patch_size > height || patch_size > width) {
      throw DataError("patch trigger of size " + std::to_string(patch_size) + " does not fit a " +
                      std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    if (!(value >= 0.0 && value <= 1.0)) throw DataError("patch value must lie in [0, 1]");
  } else if (!(alpha > 0.0 && alpha < 1.0)) {
    throw DataError("blend alpha must lie in (0, 1)");
  }
}

nlohmann::json TriggerSpec::to_json() const {
  return {{"kind", kind == TriggerKind::kPatch ? "patch" : "blend"},
          {"patch_size", patch_size},
          {"corner", corner_name(corner)},
          {"value", value},
          {"pattern_seed", pattern_seed},
          {"alpha", alpha}};
}

TriggerSpec TriggerSpec::from_json(const nlohmann::json& j) {
  TriggerSpec t;
  const std::string kind = j.value("kind", std::string("patch"));
  if (kind == "patch") {
    t.kind = TriggerKind::kPatch;
  } else if (kind == "blend") {
    t.kind = TriggerKind::kBlend;
  } else {
    throw DataError("unknown trigger kind '" + kind + "'");
  }
  t.patch_size = j.value("patch_size", t.patch_size);
  t.corner = corner_from(j.value("corner", std::string("bottom-right")));
  t.value = j.value("value", t.value);
  t.pattern_seed = j.value("pattern_seed", t.pattern_seed);
  t.alpha = j.value("alpha", t.alpha);
  return t;
}

Tensor<double> blend_pattern(std::uint64_t seed, Index channels, Index height, Index width) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  Tensor<double> p({channels, height, width});
  for (Index i = 0; i < p.size(); ++i) p[i] = byte(rng) / 255.0;
  return p;
}

Tensor<double> inject_trigger(const Tensor<double>& image, const TriggerSpec& trigger) {
  image.require_rank(3, "inject_trigger image");
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  trigger.validate(h, w);
  Tensor<double> out = image;
  if (trigger.kind == TriggerKind::kPatch) {
    apply_patch(out.raw(), c, h, w, trigger);
  } else {
    apply_blend(out.raw(), blend_pattern(trigger.pattern_seed, c, h, w), trigger.alpha);
  }
  return out;
}

void inject_trigger_all(Dataset& dataset, const TriggerSpec& trigger) {
  if (dataset.size() == 0) return;
  const Index c = dataset.channels(), h = dataset.height(), w = dataset.width();
  trigger.validate(h, w);
  const Index per = dataset.image_size();
  Tensor<double> pattern;
  if (trigger.kind == TriggerKind::kBlend) pattern = blend_pattern(trigger.pattern_seed, c, h, w);
  for (Index r = 0; r < dataset.size(); ++r) {
    double* img = dataset.images.raw() + r * per;
    if (trigger.kind == TriggerKind::kPatch) {
      apply_patch(img, c, h, w, trigger);
    } else {
      apply_blend(img, pattern, trigger.alpha);
    }
  }
}

nlohmann::json PoisonConfig::to_json() const {
  return {{"target_label", target_label},
          {"poison_rate", poison_rate},
          {"trigger", trigger.to_json()},
          {"seed", seed}};
}

PoisonConfig PoisonConfig::from_json(const nlohmann::json& j) {
  PoisonConfig p;
  p.target_label = j.value("target_label", p.target_label);
  p.poison_rate = j.value("poison_rate", p.poison_rate);
  if (j.contains("trigger")) p.trigger = TriggerSpec::from_json(j.at("trigger"));
  p.seed = j.value("seed", p.seed);
  return p;
}

Index PoisonedDataset::poisoned_count() const {
  return static_cast<Index>(std::count(poison_mask.begin(), poison_mask.end(), std::uint8_t{1}));
}

PoisonedDataset poison_dataset(const Dataset& dataset, const PoisonConfig& config) {
  dataset.validate();
  if (config.target_label < 0 || config.target_label >= dataset.num_classes) {
    throw DataError("target label " + std::to_string(config.target_label) + " is not a valid class");
  }
  if (!(config.poison_rate > 0.0 && config.poison_rate <= 1.0)) {
    throw DataError("poison rate must lie in (0, 1]");
  }
  const auto count = static_cast<Index>(std::llround(config.poison_rate * static_cast<double>(dataset.size())));
  if (count < 1) {
    throw DataError("poison rate " + std::to_string(config.poison_rate) + " on " +
                    std::to_string(dataset.size()) +
                    " records selects zero records; raise the rate or the dataset size");
  }
  std::vector<Index> candidates;
  for (Index i = 0; i < dataset.size(); ++i) {
    if (dataset.labels[static_cast<std::size_t>(i)] != config.target_label) candidates.push_back(i);
  }
  if (static_cast<Index>(candidates.size()) < count) {
    throw DataError("only " + std::to_string(candidates.size()) + " non-target records for " +
                    std::to_string(count) + " poisoned records");
  }
  std::mt19937_64 rng(config.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(static_cast<std::size_t>(count));
  std::sort(candidates.begin(), candidates.end());

  PoisonedDataset out{dataset, std::vector<std::uint8_t>(static_cast<std::size_t>(dataset.size()), 0), config};
  const Index c = dataset.channels(), h = dataset.height(), w = dataset.width();
  const Index per = dataset.image_size();
  config.trigger.validate(h, w);
  for (Index r : candidates) {
    Tensor<double> img(Shape{c, h, w}, out.dataset.images.data().segment(r * per, per));
    out.dataset.images.data().segment(r * per, per) = inject_trigger(img, config.trigger).data();
    out.dataset.labels[static_cast<std::size_t>(r)] = config.target_label;
    out.poison_mask[static_cast<std::size_t>(r)] = 1;
  }
  return out;
}

namespace {

Dataset pick_one_per_class(const Dataset& d, const std::vector<std::uint8_t>* exclude, std::uint64_t seed) {
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(d.num_classes));
  for (Index i = 0; i < d.size(); ++i) {
    if (exclude && (*exclude)[static_cast<std::size_t>(i)]) continue;
    by_class[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<Index> chosen;
  for (int k = 0; k < d.num_classes; ++k) {
    const auto& pool = by_class[static_cast<std::size_t>(k)];
    if (pool.empty()) throw DataError("defense set: class " + std::to_string(k) + " has no clean record");
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    chosen.push_back(pool[pick(rng)]);
  }
  return d.subset(chosen);
}

}  // namespace

Dataset build_defense_set(const Dataset& clean, std::uint64_t seed) {
  clean.validate();
  return pick_one_per_class(clean, nullptr, seed);
}

Dataset build_defense_set(const PoisonedDataset& poisoned, std::uint64_t seed) {
  poisoned.dataset.validate();
  return pick_one_per_class(poisoned.dataset, &poisoned.poison_mask, seed);
}

Dataset build_asr_eval_set(const Dataset& test, const TriggerSpec& trigger, int target_label) {
  std::vector<Index> keep;
  for (Index i = 0; i < test.size(); ++i) {
    if (test.labels[static_cast<std::size_t>(i)] != target_label) keep.push_back(i);
  }
  Dataset out = test.subset(keep);
  inject_trigger_all(out, trigger);
  return out;
}

}  // namespace bdnp
