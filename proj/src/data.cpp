#include "pplug/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pplug/common.hpp"

using nlohmann::json;

namespace pplug {

TaskSpec task_spec(const std::string& task_id) {
  TaskSpec s;
  s.task_id = task_id;
  if (task_id == "lamp1") {
    s.input_template =
        "For an author who has written the paper with the title \"{title}\", which reference is "
        "related? Just answer with [1] or [2] without explanation. [1]: \"{reference1}\" [2]: "
        "\"{reference2}\"";
    s.history_template = "title: {title} abstract: {abstract}";
    s.label_set = {"[1]", "[2]"};
  } else if (task_id == "lamp2") {
    s.input_template =
        "Which tag does this movie relate to among the following tags? Just answer with the tag "
        "name without further explanation. tags: [sci-fi, based on a book, comedy, action, twist "
        "ending, dystopia, dark comedy, classic, psychology, fantasy, romance, thought-provoking, "
        "social commentary, violence, true story] description: {movie}";
    s.history_template = "description: {description} tag: {tag}";
    s.label_set = {"sci-fi",   "based on a book", "comedy",        "action",
                   "twist ending", "dystopia",    "dark comedy",   "classic",
                   "psychology",   "fantasy",     "romance",       "thought-provoking",
                   "social commentary", "violence", "true story"};
  } else if (task_id == "lamp3") {
    s.input_template =
        "What is the score of the following review on a scale of 1 to 5? Just answer with 1, 2, "
        "3, 4, or 5 without further explanation. review: {review}";
    s.history_template = "text: {text} score: {score}";
    s.label_set = {"1", "2", "3", "4", "5"};
  } else if (task_id == "lamp4") {
    s.input_template = "Generate a headline for the following article: {article}";
    s.history_template = "title: {title} text: {text}";
    s.is_generation = true;
  } else if (task_id == "lamp5") {
    s.input_template = "Generate a title for the following abstract of a paper: {abstract}";
    s.history_template = "title: {title} text: {abstract}";
    s.is_generation = true;
  } else if (task_id == "lamp7") {
    s.input_template = "Paraphrase the following tweet without any explanation before or after it: {tweet}";
    s.history_template = "text: {text}";
    s.is_generation = true;
  } else if (task_id == "synth") {
    s.input_template = "item {topic}";
    s.history_template = "item {topic} {label}";
    // label_set filled by generate_synthetic (depends on num_styles)
  } else {
    throw std::invalid_argument("task_spec: unknown task " + task_id);
  }
  return s;
}

std::string render_template(const std::string& tmpl,
                            const std::map<std::string, std::string>& fields) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    char c = tmpl[i];
    if (c == '{') {
      std::size_t close = tmpl.find('}', i + 1);
      if (close == std::string::npos)
        throw std::runtime_error("render_template: unterminated placeholder");
      std::string key = tmpl.substr(i + 1, close - i - 1);
      auto it = fields.find(key);
      if (it == fields.end())
        throw std::runtime_error("render_template: missing field '" + key + "'");
      out += it->second;
      i = close + 1;
    } else {
      out.push_back(c);
      ++i;
    }
  }
  return out;
}

namespace {

json load_json(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  json j;
  is >> j;
  return j;
}

std::string json_str(const json& j) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  if (j.is_number()) return std::to_string(j.get<double>());
  return j.dump();
}

}  // namespace

IngestResult ingest_lamp(const std::string& questions_path, const std::string& outputs_path,
                         const TaskSpec& spec, const std::string& split_name) {
  json questions = load_json(questions_path);
  json outputs = load_json(outputs_path);
  if (!questions.is_array()) throw std::runtime_error("ingest_lamp: questions file is not an array");
  if (!outputs.contains("golds"))
    throw std::runtime_error("ingest_lamp: outputs file has no 'golds'");

  std::map<std::string, std::string> golds;
  for (const auto& g : outputs["golds"]) golds[json_str(g.at("id"))] = json_str(g.at("output"));

  std::vector<std::string> missing;
  for (const auto& q : questions) {
    std::string id = json_str(q.at("id"));
    if (!golds.count(id)) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string msg = "ingest_lamp: ids missing from golds:";
    for (const auto& id : missing) msg += " " + id;
    throw std::runtime_error(msg);
  }

  IngestResult result;
  result.split.name = split_name;
  for (const auto& q : questions) {
    std::string id = json_str(q.at("id"));
    auto profile = std::make_shared<UserProfile>();
    profile->user_id = id;  // LaMP keys profiles by question id
    long long synth_ts = 0;
    if (q.contains("profile")) {
      for (const auto& p : q["profile"]) {
        Behavior b;
        for (auto it = p.begin(); it != p.end(); ++it) b.raw_fields[it.key()] = json_str(it.value());
        b.behavior_id = b.raw_fields.count("id") ? b.raw_fields["id"]
                                                 : std::to_string(profile->behaviors.size());
        if (b.raw_fields.count("timestamp")) {
          b.timestamp = std::stoll(b.raw_fields["timestamp"]);
        } else {
          b.timestamp = synth_ts;  // file order stands in for time
        }
        ++synth_ts;
        b.text = render_template(spec.history_template, b.raw_fields);
        profile->behaviors.push_back(std::move(b));
      }
    }
    if (profile->behaviors.empty()) {
      std::cerr << "ingest_lamp: skipping instance " << id << " (empty profile)\n";
      result.skipped_ids.push_back(id);
      continue;
    }
    std::stable_sort(profile->behaviors.begin(), profile->behaviors.end(),
                     [](const Behavior& a, const Behavior& b) { return a.timestamp < b.timestamp; });
    TaskInstance inst;
    inst.instance_id = id;
    inst.task_id = spec.task_id;
    inst.input_text = json_str(q.at("input"));
    inst.gold_output = golds.at(id);
    inst.profile = profile;
    result.split.instances.push_back(std::move(inst));
  }
  return result;
}

std::string synth_topic_word(int topic) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "topic%02d", topic);
  return buf;
}

std::string synth_label_word(int index) {
  static const char* kNames[] = {"red",   "blue",  "green", "amber", "violet",
                                 "teal",  "coral", "olive", "ivory", "plum"};
  if (index >= 0 && index < 10) return kNames[index];
  return "label" + std::to_string(index);
}

std::string synth_gold(int style, int topic, int num_styles) {
  // Label table indexed by (style, topic hash): per topic the styles map onto
  // distinct labels, and over uniform styles the label is uniform per topic.
  int h = static_cast<int>(splitmix64(static_cast<std::uint64_t>(topic)) %
                           static_cast<std::uint64_t>(num_styles));
  return synth_label_word((style + h) % num_styles);
}

SynthData generate_synthetic(const SynthConfig& cfg) {
  if (cfg.num_users < 2) throw std::invalid_argument("generate_synthetic: num_users must be >= 2");
  if (cfg.num_styles < 2) throw std::invalid_argument("generate_synthetic: num_styles must be >= 2");
  if (cfg.histories_per_user < 2)
    throw std::invalid_argument("generate_synthetic: histories_per_user must be >= 2");
  if (cfg.topic_vocab_size < 1)
    throw std::invalid_argument("generate_synthetic: topic_vocab_size must be >= 1");

  Rng rng(cfg.seed ^ 0x5e5e5e5e01020304ULL);
  SynthData out;
  out.spec = task_spec("synth");
  for (int s = 0; s < cfg.num_styles; ++s) out.spec.label_set.push_back(synth_label_word(s));
  out.train.name = "train";
  out.validation.name = "validation";

  std::vector<int> history_topics;
  for (int u = 0; u < cfg.num_users; ++u) {
    int style = u % cfg.num_styles;  // exactly equidistributed
    auto profile = std::make_shared<UserProfile>();
    profile->user_id = "u" + std::to_string(u);
    if (style == 0) {
      // One topic multiset per group of num_styles consecutive users: every
      // topic is then touched by all styles equally, so no style is readable
      // from the input text alone.
      history_topics.clear();
      for (int i = 0; i < cfg.histories_per_user; ++i)
        history_topics.push_back(
            static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topic_vocab_size))));
    }
    for (int i = 0; i < cfg.histories_per_user; ++i) {
      int topic = history_topics[static_cast<std::size_t>(i)];
      Behavior b;
      b.behavior_id = "b" + std::to_string(i);
      b.timestamp = i;
      b.raw_fields["topic"] = synth_topic_word(topic);
      b.raw_fields["label"] = synth_gold(style, topic, cfg.num_styles);
      b.text = render_template(out.spec.history_template, b.raw_fields);
      profile->behaviors.push_back(std::move(b));
    }
    auto emit = [&](DatasetSplit& split, int count, const char* tag) {
      for (int j = 0; j < count; ++j) {
        // Draw the instance topic from the user's own history so the answer
        // is always recoverable from the profile; the style stays uniform per
        // topic across users, so the input alone still reveals nothing.
        int topic = history_topics[rng.below(history_topics.size())];
        TaskInstance inst;
        inst.instance_id = profile->user_id + "-" + tag + "-" + std::to_string(j);
        inst.task_id = "synth";
        inst.input_text = render_template(out.spec.input_template,
                                          {{"topic", synth_topic_word(topic)}});
        inst.gold_output = synth_gold(style, topic, cfg.num_styles);
        inst.profile = profile;
        split.instances.push_back(std::move(inst));
      }
    };
    emit(out.train, cfg.train_instances_per_user, "train");
    emit(out.validation, cfg.val_instances_per_user, "val");
  }
  return out;
}

void write_jsonl(const DatasetSplit& split, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const auto& inst : split.instances) {
    json j;
    j["id"] = inst.instance_id;
    j["task"] = inst.task_id;
    j["input"] = inst.input_text;
    j["output"] = inst.gold_output;
    j["user"] = inst.profile ? inst.profile->user_id : "";
    json prof = json::array();
    if (inst.profile) {
      for (const auto& b : inst.profile->behaviors) {
        prof.push_back({{"id", b.behavior_id}, {"text", b.text}, {"timestamp", b.timestamp}});
      }
    }
    j["profile"] = std::move(prof);
    os << j.dump() << '\n';
  }
}

DatasetSplit read_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_jsonl: cannot open " + path);
  DatasetSplit split;
  split.name = "loaded";
  std::map<std::string, ProfilePtr> profiles;  // shared across a user's instances
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    TaskInstance inst;
    inst.instance_id = j.at("id").get<std::string>();
    inst.task_id = j.at("task").get<std::string>();
    inst.input_text = j.at("input").get<std::string>();
    inst.gold_output = j.at("output").get<std::string>();
    std::string user = j.value("user", inst.instance_id);
    auto it = profiles.find(user);
    if (it != profiles.end()) {
      inst.profile = it->second;
    } else {
      auto profile = std::make_shared<UserProfile>();
      profile->user_id = user;
      for (const auto& p : j.at("profile")) {
        Behavior b;
        b.behavior_id = p.at("id").get<std::string>();
        b.text = p.at("text").get<std::string>();
        b.timestamp = p.at("timestamp").get<long long>();
        profile->behaviors.push_back(std::move(b));
      }
      inst.profile = profile;
      profiles[user] = profile;
    }
    split.instances.push_back(std::move(inst));
  }
  return split;
}

std::vector<std::string> corpus_from_split(const DatasetSplit& split) {
  std::vector<std::string> corpus;
  std::set<std::string> seen;
  auto add = [&](const std::string& s) {
    if (!s.empty() && seen.insert(s).second) corpus.push_back(s);
  };
  std::set<const UserProfile*> profiles;
  for (const auto& inst : split.instances) {
    add(inst.input_text + " " + inst.gold_output);
    if (inst.profile && profiles.insert(inst.profile.get()).second) {
      for (const auto& b : inst.profile->behaviors) add(b.text);
    }
  }
  return corpus;
}

std::vector<std::string> user_stream_corpus(const DatasetSplit& split) {
  std::vector<std::string> docs;
  std::set<const UserProfile*> profiles;
  for (const auto& inst : split.instances) {
    if (!inst.profile || !profiles.insert(inst.profile.get()).second) continue;
    std::string doc;
    for (const auto& b : inst.profile->behaviors) {
      if (!doc.empty()) doc += ' ';
      doc += b.text;
    }
    if (!doc.empty()) docs.push_back(std::move(doc));
  }
  return docs;
}

Tokenizer build_tokenizer(const std::vector<std::string>& corpus, int vocab_size) {
  return Tokenizer::build(corpus, vocab_size);
}

}  // namespace pplug
