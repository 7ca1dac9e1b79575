#pragma once

#include "bdnp/dataset.hpp"

#include <json.hpp>

namespace bdnp {

enum class TriggerKind { kPatch, kBlend };
enum class Corner { kBottomRight, kBottomLeft, kTopRight, kTopLeft };

struct TriggerSpec {
  TriggerKind kind = TriggerKind::kPatch;
  Index patch_size = 3;
  Corner corner = Corner::kBottomRight;
  double value = 1.0;
  std::uint64_t pattern_seed = 0;
  double alpha = 0.2;

  /// Throws DataError unless the trigger fits an image of the given size.
  void validate(Index height, Index width) const;

  nlohmann::json to_json() const;
  static TriggerSpec from_json(const nlohmann::json& j);
};

/// Seeded uniform blend pattern [C,H,W] on the 1/255 grid.
Tensor<double> blend_pattern(std::uint64_t seed, Index channels, Index height, Index width);

/// Returns a triggered copy of one [C,H,W] image. Patch triggers overwrite
/// the corner block in every channel; blend triggers return
/// (1 - alpha) * image + alpha * pattern.
Tensor<double> inject_trigger(const Tensor<double>& image, const TriggerSpec& trigger);

/// Applies the trigger to every image of `dataset` in place.
void inject_trigger_all(Dataset& dataset, const TriggerSpec& trigger);

struct PoisonConfig {
  int target_label = 0;
  double poison_rate = 0.10;
  TriggerSpec trigger;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PoisonConfig from_json(const nlohmann::json& j);
};

struct PoisonedDataset {
  Dataset dataset;
  std::vector<std::uint8_t> poison_mask;  // 1 = triggered and relabelled
  PoisonConfig config;

  Index poisoned_count() const;
};

/// Triggers and relabels a seeded sample of round(rate * N) records drawn
/// from the records whose label differs from the target.
PoisonedDataset poison_dataset(const Dataset& dataset, const PoisonConfig& config);

/// One seeded-random record per class.
Dataset build_defense_set(const Dataset& clean, std::uint64_t seed);

/// Same, restricted to the records the poison mask leaves clean.
Dataset build_defense_set(const PoisonedDataset& poisoned, std::uint64_t seed);

/// Triggered copies of every record whose true label differs from the
/// target; labels keep the true class.
Dataset build_asr_eval_set(const Dataset& test, const TriggerSpec& trigger, int target_label);

}  // namespace bdnp
