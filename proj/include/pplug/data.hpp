#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pplug/tokenizer.hpp"

namespace pplug {

struct Behavior {
  std::string behavior_id;
  std::string text;
  long long timestamp = 0;
  std::map<std::string, std::string> raw_fields;
};

struct UserProfile {
  std::string user_id;
  std::vector<Behavior> behaviors;  // sorted ascending by timestamp
};

using ProfilePtr = std::shared_ptr<const UserProfile>;

struct TaskSpec {
  std::string task_id;  // lamp1..lamp5, lamp7, synth
  std::string input_template;
  std::string history_template;
  std::vector<std::string> label_set;  // empty for generation tasks
  bool is_generation = false;
};

// Built-in specs for the six LaMP tasks and the synthetic task.
TaskSpec task_spec(const std::string& task_id);

struct TaskInstance {
  std::string instance_id;
  std::string task_id;
  std::string input_text;
  std::string gold_output;
  ProfilePtr profile;
};

struct DatasetSplit {
  std::string name;  // train | validation | test
  std::vector<TaskInstance> instances;
};

// Exact placeholder substitution; throws naming the placeholder on a miss.
std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& fields);

struct IngestResult {
  DatasetSplit split;
  std::vector<std::string> skipped_ids;  // empty-profile instances
};

// LaMP ingestion: questions file = array of {id, input, profile:[...]},
// outputs file = {task, golds:[{id, output}]}.
IngestResult ingest_lamp(const std::string& questions_path, const std::string& outputs_path,
                         const TaskSpec& spec, const std::string& split_name = "train");

struct SynthConfig {
  int num_users = 100;
  int histories_per_user = 16;
  int num_styles = 5;
  int topic_vocab_size = 24;
  std::uint64_t seed = 0;
  int train_instances_per_user = 20;
  int val_instances_per_user = 5;
};

struct SynthData {
  DatasetSplit train;
  DatasetSplit validation;
  TaskSpec spec;
};

// Synthetic personalization task: each user carries a latent style; the gold
// label for (style, topic) comes from a deterministic table, so the label is
// uniform given the input text alone and only the history reveals it.
SynthData generate_synthetic(const SynthConfig& cfg);

// The label a user of `style` produces for topic index `topic`.
std::string synth_gold(int style, int topic, int num_styles);
std::string synth_topic_word(int topic);
std::string synth_label_word(int index);

// Canonical JSON Lines serialization.
void write_jsonl(const DatasetSplit& split, const std::string& path);
DatasetSplit read_jsonl(const std::string& path);

// All distinct texts (behaviors + inputs + golds) for pretraining corpora.
std::vector<std::string> corpus_from_split(const DatasetSplit& split);

// One document per distinct profile: the user's behaviors joined with single
// spaces, oldest first. Long-range pretraining material so a causal LM learns
// to reuse labels seen earlier in its context.
std::vector<std::string> user_stream_corpus(const DatasetSplit& split);

Tokenizer build_tokenizer(const std::vector<std::string>& corpus, int vocab_size);

}  // namespace pplug
