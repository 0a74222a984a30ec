#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pplug/data.hpp"
#include "pplug/encoder.hpp"
#include "pplug/lm.hpp"
#include "pplug/metrics.hpp"
#include "pplug/optim.hpp"
#include "pplug/persona.hpp"
#include "pplug/retrieval.hpp"

namespace pplug {

enum class VariantKind { pplug, pplug_mean, pplug_topk, pplug_retrieval, rbp, adhoc };

struct Variant {
  VariantKind kind = VariantKind::pplug;
  int topk = 4;
  RetrieverKind retriever = RetrieverKind::bm25;
  int rbp_k = 4;

  std::string to_string() const;
  static Variant parse(const std::string& s);  // pplug|mean|topk:K|retrieval|rbp:kind|adhoc
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double warmup_ratio = 0.05;
  int batch_size = 16;
  int epochs = 2;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables
  DecayMode decay = DecayMode::linear;
  std::uint64_t seed = 0;
  Variant variant;
};

// All model state involved in one run. The freeze policy partitions it into
// trainable {instruction, input_encoder, projector} and frozen {lm,
// frozen_encoder}.
struct ModelBundle {
  Tokenizer tokenizer;
  EncoderParams frozen_encoder;
  EncoderParams input_encoder;
  ProjectorParams projector;
  InstructionEmbedding instruction;
  LMParams lm;

  std::vector<ParamView> trainable_views();
  std::uint64_t trainable_hash();
  std::uint64_t frozen_hash() const;
};

struct TrainState {
  ModelBundle bundle;
  AdamW optimizer{0.9, 0.999, 1e-8, 0.0};
  long steps_done = 0;
  TrainConfig cfg;
  Rng rng{0};
};

struct LossPoint {
  long step;
  double loss;
  double lr;
};

struct TrainReport {
  std::vector<LossPoint> curve;
  double final_loss = 0.0;
  long total_steps = 0;
};

TrainState make_train_state(ModelBundle bundle, const TrainConfig& cfg);

// Runs until `epochs` worth of steps have completed (resumable: picks up at
// state.steps_done). Frozen-parameter hashes are checked every step; a
// violation aborts. Writes step,loss,lr to loss_csv_path when non-empty.
// stop_after_steps >= 0 pauses the run after that many total steps while the
// schedule still spans the full horizon, so a resumed run is bit-identical to
// an uninterrupted one.
TrainReport train(TrainState& state, const DatasetSplit& split, EmbeddingCache* cache,
                  const std::string& loss_csv_path = "", long stop_after_steps = -1);

struct MetricReport {
  std::map<std::string, double> values;
  long instance_count = 0;
  std::string variant;
  std::string split;
  double wall_clock_sec = 0.0;
};

struct EvalConfig {
  Variant variant;
  int beam_size = 4;
  int max_new_tokens = 24;
  int topk_override = 0;  // >0: evaluate with top-K aggregation
  std::string predictions_path;  // JSONL {"id","prediction","gold"} when set
};

MetricReport evaluate(ModelBundle& bundle, const DatasetSplit& split, const TaskSpec& spec,
                      const EvalConfig& cfg, EmbeddingCache* cache = nullptr);

void write_metric_report(const MetricReport& report, const std::string& path);

enum class GradComponent { projector, input_encoder, instruction };

// Central finite differences vs the analytic gradient of the full pipeline
// loss on a tiny deterministic instance; returns the max relative error.
double grad_check(GradComponent component, double eps = 1e-4, std::uint64_t seed = 13);

// Checkpoint directory: manifest.json + params.bin (LE float32) +
// tokenizer.txt. Bit-exact roundtrip, digest-verified load.
void save_checkpoint(const TrainState& state, const std::string& dir);
TrainState load_checkpoint(const std::string& dir);

}  // namespace pplug
