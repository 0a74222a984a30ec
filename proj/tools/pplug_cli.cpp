// Command-line driver: ingest, pretrain, train, eval, embed-user.
//
// Exit codes: 0 success, 2 input error, 3 lookup error, 4 numerical abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "pplug/trainkit.hpp"

using nlohmann::json;
using namespace pplug;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitLookup = 3;
constexpr int kExitNumeric = 4;

struct CliError {
  int code;
  std::string message;
};

// flags > config file > defaults: config-file values are applied only to
// options the user did not pass on the command line.
void apply_config_file(CLI::App* cmd, const std::string& path) {
  if (path.empty()) return;
  std::ifstream is(path);
  if (!is) throw CliError{kExitInput, "cannot open config file " + path};
  json cfg;
  try {
    is >> cfg;
  } catch (const std::exception& e) {
    throw CliError{kExitInput, std::string("bad config file: ") + e.what()};
  }
  for (auto& [key, value] : cfg.items()) {
    CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (!opt || opt->count() > 0) continue;
    std::string s = value.is_string() ? value.get<std::string>() : value.dump();
    opt->add_result(s);
    opt->run_callback();
  }
}

void write_resolved_config(const CLI::App* cmd, const std::string& dir) {
  json j;
  for (const CLI::Option* opt : cmd->get_options()) {
    std::string name = opt->get_name();
    if (name.rfind("--", 0) != 0 || name == "--help" || name == "--config") continue;
    auto results = opt->results();
    if (results.size() == 1)
      j[name.substr(2)] = results.front();
    else if (!results.empty())
      j[name.substr(2)] = results;
  }
  std::filesystem::create_directories(dir);
  std::ofstream os(dir + "/config.resolved.json", std::ios::trunc);
  os << j.dump(2) << '\n';
}

std::unique_ptr<EmbeddingCache> open_cache() {
  const char* dir = std::getenv("PPLUG_CACHE_DIR");
  if (!dir || !*dir) return nullptr;
  auto cache = std::make_unique<EmbeddingCache>();
  if (std::filesystem::exists(std::string(dir) + "/index.txt")) {
    try {
      *cache = EmbeddingCache::load(dir);
    } catch (const std::exception& e) {
      std::cerr << "warning: ignoring unreadable embedding cache: " << e.what() << '\n';
    }
  }
  return cache;
}

void close_cache(EmbeddingCache* cache) {
  const char* dir = std::getenv("PPLUG_CACHE_DIR");
  if (!cache || !dir || !*dir) return;
  std::filesystem::create_directories(dir);
  cache->save(dir);
}

void refuse_overwrite(const std::string& dir, bool force) {
  if (!force && std::filesystem::exists(dir + "/manifest.json"))
    throw CliError{kExitInput, dir + " already holds a checkpoint (use --force to overwrite)"};
}

// ---------------------------------------------------------------------------

int cmd_ingest(const std::string& task, const std::string& questions, const std::string& outputs,
               const std::string& out, bool synth, int users, int histories, int styles,
               int topics, std::uint64_t seed) {
  if (synth) {
    SynthConfig cfg;
    cfg.num_users = users;
    cfg.histories_per_user = histories;
    cfg.num_styles = styles;
    cfg.topic_vocab_size = topics;
    cfg.seed = seed;
    SynthData data = generate_synthetic(cfg);
    std::filesystem::create_directories(out);
    write_jsonl(data.train, out + "/train.jsonl");
    write_jsonl(data.validation, out + "/validation.jsonl");
    std::cout << "train instances: " << data.train.instances.size() << '\n'
              << "validation instances: " << data.validation.instances.size() << '\n'
              << "label-set size: " << data.spec.label_set.size() << '\n';
    return 0;
  }
  if (questions.empty() || outputs.empty())
    throw CliError{kExitInput, "ingest needs --questions and --outputs (or --synth)"};
  TaskSpec spec = task_spec(task);
  IngestResult r = ingest_lamp(questions, outputs, spec);
  std::filesystem::create_directories(std::filesystem::path(out).parent_path().string().empty()
                                          ? "."
                                          : std::filesystem::path(out).parent_path().string());
  write_jsonl(r.split, out);
  std::cout << "instances: " << r.split.instances.size() << '\n'
            << "skipped (empty profile): " << r.skipped_ids.size() << '\n'
            << "label-set size: " << spec.label_set.size() << '\n';
  return 0;
}

int cmd_pretrain(const std::string& what, const std::string& data, const std::string& out,
                 std::uint64_t seed, bool force, int vocab, int d_enc, int d_lm, long enc_steps,
                 long lm_steps) {
  refuse_overwrite(out, force);
  DatasetSplit split = read_jsonl(data);
  std::vector<std::string> corpus = corpus_from_split(split);

  ModelBundle b;
  b.tokenizer = build_tokenizer(corpus, vocab);
  Rng rng(seed);

  EncoderConfig ec;
  ec.d_enc = d_enc;
  ec.vocab_size = b.tokenizer.size();
  if (what == "lm") {
    b.frozen_encoder = init_encoder(ec, rng);
  } else {
    EncoderPretrainConfig pc;
    pc.steps = enc_steps;
    pc.seed = seed;
    EncoderPretrainReport rep;
    b.frozen_encoder = pretrain_encoder(corpus, b.tokenizer, ec, pc, &rep);
    std::cout << "encoder masked-token accuracy (holdout): " << rep.holdout_masked_accuracy
              << '\n';
  }
  b.input_encoder = clone_params(b.frozen_encoder);

  LMConfig lc;
  lc.d_lm = d_lm;
  lc.vocab_size = b.tokenizer.size();
  if (what == "encoder") {
    b.lm = init_lm(lc, rng);
  } else {
    // Per-user behavior streams teach the LM to reuse labels from earlier
    // context, which is the pathway the persona prefix later plugs into.
    std::vector<std::string> lm_corpus = corpus;
    for (auto& doc : user_stream_corpus(split)) lm_corpus.push_back(std::move(doc));
    LMPretrainConfig pc;
    pc.steps = lm_steps;
    pc.seed = seed;
    LMPretrainReport rep;
    b.lm = pretrain_lm(lm_corpus, b.tokenizer, lc, pc, &rep);
    std::cout << "lm perplexity (holdout): " << rep.holdout_perplexity << '\n';
  }

  b.projector = init_projector(ec.d_enc, lc.d_lm, rng);
  b.instruction = init_instruction(1, lc.d_lm, rng);

  TrainConfig tc;
  tc.seed = seed;
  save_checkpoint(make_train_state(std::move(b), tc), out);
  std::cout << "checkpoint written to " << out << '\n';
  return 0;
}

int cmd_train(const std::string& ckpt, const std::string& data, const std::string& out,
              const std::string& variant, std::uint64_t seed, int epochs, int batch, double lr,
              bool resume, bool force, long limit) {
  refuse_overwrite(out, force && out != ckpt);
  TrainState st = load_checkpoint(ckpt);
  if (!resume) {
    st.steps_done = 0;
    st.optimizer = AdamW(0.9, 0.999, 1e-8, st.cfg.weight_decay);
    st.cfg.variant = Variant::parse(variant);
    st.cfg.seed = seed;
    st.cfg.epochs = epochs;
    st.cfg.batch_size = batch;
    st.cfg.learning_rate = lr;
    st.rng = Rng(seed);
  }
  DatasetSplit split = read_jsonl(data);
  if (limit > 0 && static_cast<long>(split.instances.size()) > limit)
    split.instances.resize(static_cast<std::size_t>(limit));
  auto cache = open_cache();
  std::filesystem::create_directories(out);
  try {
    TrainReport rep = train(st, split, cache.get(), out + "/loss.csv");
    std::cout << "steps: " << rep.total_steps << " final loss: " << rep.final_loss << '\n';
  } catch (const std::runtime_error& e) {
    throw CliError{kExitNumeric, e.what()};
  }
  close_cache(cache.get());
  save_checkpoint(st, out);
  std::cout << "checkpoint written to " << out << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& task,
             const std::string& out, const std::string& variant, int beam, int topk,
             const std::string& curve, long limit) {
  TrainState st = load_checkpoint(ckpt);
  DatasetSplit split = read_jsonl(data);
  if (limit > 0 && static_cast<long>(split.instances.size()) > limit)
    split.instances.resize(static_cast<std::size_t>(limit));
  TaskSpec spec = task_spec(task);
  if (task == "synth") {
    // Rebuild the label set the generator used (one label per style).
    std::set<std::string> labels;
    for (const auto& inst : split.instances) labels.insert(inst.gold_output);
    spec.label_set.assign(labels.begin(), labels.end());
  }
  auto cache = open_cache();
  std::filesystem::create_directories(out);

  EvalConfig ec;
  ec.variant = variant.empty() ? st.cfg.variant : Variant::parse(variant);
  ec.beam_size = beam;
  if (topk > 0 && ec.variant.kind == VariantKind::pplug_topk) ec.variant.topk = topk;
  ec.predictions_path = out + "/predictions.jsonl";
  MetricReport report = evaluate(st.bundle, split, spec, ec, cache.get());
  report.values["seed"] = static_cast<double>(st.cfg.seed);
  write_metric_report(report, out + "/report.json");
  for (const auto& [k, v] : report.values) std::cout << k << ": " << v << '\n';

  if (!curve.empty()) {
    auto dots = curve.find("..");
    if (dots == std::string::npos)
      throw CliError{kExitInput, "--selection-curve expects LO..HI, e.g. 2..8"};
    int lo = std::stoi(curve.substr(0, dots));
    int hi = std::stoi(curve.substr(dots + 2));
    if (lo < 1 || hi < lo) throw CliError{kExitInput, "bad --selection-curve range"};
    const std::string metric = spec.is_generation ? "rouge1" : "accuracy";
    auto acc_at = [&](int K) {
      EvalConfig c;
      c.variant.kind = VariantKind::pplug;
      c.beam_size = beam;
      c.topk_override = K;  // 0 = full attention
      return evaluate(st.bundle, split, spec, c, cache.get()).values.at(metric);
    };
    double r_all = acc_at(0);
    double r_k2 = acc_at(2);
    std::ofstream cs(out + "/selection_curve.csv", std::ios::trunc);
    cs << "K,R,R_norm\n";
    for (int K = lo; K <= hi; ++K) {
      double r = K == 2 ? r_k2 : acc_at(K);
      cs << K << ',' << r << ',' << normalize_selection(r, r_k2, r_all) << '\n';
    }
    cs << "all," << r_all << ',' << normalize_selection(r_all, r_k2, r_all) << '\n';
    std::cout << "selection curve written to " << out << "/selection_curve.csv\n";
  }
  close_cache(cache.get());
  return 0;
}

int cmd_embed_user(const std::string& ckpt, const std::string& data, const std::string& user_id,
                   const std::string& out) {
  TrainState st = load_checkpoint(ckpt);
  DatasetSplit split = read_jsonl(data);
  ProfilePtr profile;
  for (const auto& inst : split.instances)
    if (inst.profile && inst.profile->user_id == user_id) {
      profile = inst.profile;
      break;
    }
  if (!profile) throw CliError{kExitLookup, "unknown user: " + user_id};
  auto cache = open_cache();
  EncodedProfile enc =
      encode_profile(st.bundle.frozen_encoder, st.bundle.tokenizer, *profile, cache.get());
  // Input-independent export: the mean aggregation over the full history.
  PersonalEmbedding p = personal_embedding_mean(enc, st.bundle.projector);
  write_personal_embedding(out, user_id, p.vector);
  close_cache(cache.get());
  std::cout << "wrote " << out << " (width " << p.vector.size() << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized-LM pipeline: ingest, pretrain, train, eval, embed-user"};
  app.require_subcommand(1);

  std::string config_path, task = "synth", questions, outputs, out, data, ckpt;
  std::string what = "both", variant = "pplug", eval_variant, curve, user_id;
  std::uint64_t seed = 0;
  bool synth = false, force = false, resume = false;
  int users = 100, histories = 16, styles = 5, topics = pplug::SynthConfig{}.topic_vocab_size;
  int vocab = 512, d_enc = 32, d_lm = 32, epochs = 2, batch = 16, beam = 4, topk = 0;
  long enc_steps = 400, lm_steps = 600, limit = 0;
  double lr = 1e-4;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "JSON config file (flags take precedence)");
    c->add_option("--seed", seed, "deterministic seed");
  };

  CLI::App* ingest = app.add_subcommand("ingest", "build a canonical JSONL dataset");
  add_common(ingest);
  ingest->add_option("--task", task, "task id (lamp1..lamp5, lamp7, synth)");
  ingest->add_option("--questions", questions, "LaMP questions JSON");
  ingest->add_option("--outputs", outputs, "LaMP outputs JSON");
  ingest->add_option("--out", out, "output file (LaMP) or directory (synthetic)")->required();
  ingest->add_flag("--synth", synth, "generate the synthetic personalization task");
  ingest->add_option("--users", users, "synthetic users");
  ingest->add_option("--histories", histories, "behaviors per user");
  ingest->add_option("--styles", styles, "latent styles");
  ingest->add_option("--topics", topics, "topic vocabulary size");

  CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain the frozen encoder and LM");
  add_common(pretrain);
  pretrain->add_option("--what", what, "lm | encoder | both");
  pretrain->add_option("--data", data, "training JSONL")->required();
  pretrain->add_option("--out", out, "checkpoint directory")->required();
  pretrain->add_option("--vocab", vocab, "tokenizer vocabulary size");
  pretrain->add_option("--d-enc", d_enc, "encoder width");
  pretrain->add_option("--d-lm", d_lm, "LM width");
  pretrain->add_option("--enc-steps", enc_steps, "encoder pretraining steps");
  pretrain->add_option("--lm-steps", lm_steps, "LM pretraining steps");
  pretrain->add_flag("--force", force, "overwrite an existing checkpoint");

  CLI::App* train = app.add_subcommand("train", "train a variant from a pretrained checkpoint");
  add_common(train);
  train->add_option("--ckpt", ckpt, "input checkpoint directory")->required();
  train->add_option("--data", data, "training JSONL")->required();
  train->add_option("--out", out, "output checkpoint directory")->required();
  train->add_option("--variant", variant, "pplug|mean|topk:K|retrieval|rbp:kind|adhoc");
  train->add_option("--epochs", epochs, "training epochs");
  train->add_option("--batch", batch, "batch size");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--limit", limit, "use only the first N instances");
  train->add_flag("--resume", resume, "continue the checkpoint's own run");
  train->add_flag("--force", force, "overwrite an existing checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(eval);
  eval->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  eval->add_option("--data", data, "evaluation JSONL")->required();
  eval->add_option("--task", task, "task id");
  eval->add_option("--out", out, "report directory")->required();
  eval->add_option("--variant", eval_variant, "override the checkpoint's variant");
  eval->add_option("--beam", beam, "beam size");
  eval->add_option("--topk", topk, "top-K for the topk variant");
  eval->add_option("--limit", limit, "use only the first N instances");
  eval->add_option("--selection-curve", curve, "sweep K, e.g. 2..8");

  CLI::App* embed = app.add_subcommand("embed-user", "export one user's personal embedding");
  add_common(embed);
  embed->add_option("--ckpt", ckpt, "checkpoint directory")->required();
  embed->add_option("--data", data, "JSONL holding the user's profile")->required();
  embed->add_option("--user-id", user_id, "user to export")->required();
  embed->add_option("--out", out, "output file")->required();

  CLI11_PARSE(app, argc, argv);
  CLI::App* cmd = app.get_subcommands().front();

  try {
    apply_config_file(cmd, config_path);
    int rc;
    if (cmd == ingest)
      rc = cmd_ingest(task, questions, outputs, out, synth, users, histories, styles, topics,
                      seed);
    else if (cmd == pretrain)
      rc = cmd_pretrain(what, data, out, seed, force, vocab, d_enc, d_lm, enc_steps, lm_steps);
    else if (cmd == train)
      rc = cmd_train(ckpt, data, out, variant, seed, epochs, batch, lr, resume, force, limit);
    else if (cmd == eval)
      rc = cmd_eval(ckpt, data, task, out, eval_variant, beam, topk, curve, limit);
    else
      rc = cmd_embed_user(ckpt, data, user_id, out);
    if (rc == 0 && !out.empty()) {
      std::string dir = std::filesystem::is_directory(out)
                            ? out
                            : std::filesystem::path(out).parent_path().string();
      if (dir.empty()) dir = ".";
      write_resolved_config(cmd, dir);
    }
    return rc;
  } catch (const CliError& e) {
    std::cerr << "error: " << e.message << '\n';
    return e.code;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    std::string msg = e.what();
    if (msg.find("non-finite") != std::string::npos || msg.find("freeze") != std::string::npos)
      return kExitNumeric;
    return kExitInput;
  }
}
