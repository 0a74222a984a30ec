#include "pplug/trainkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace pplug {

std::string Variant::to_string() const {
  switch (kind) {
    case VariantKind::pplug:
      return "pplug";
    case VariantKind::pplug_mean:
      return "mean";
    case VariantKind::pplug_topk:
      return "topk:" + std::to_string(topk);
    case VariantKind::pplug_retrieval:
      return "retrieval";
    case VariantKind::rbp: {
      const char* k = retriever == RetrieverKind::bm25      ? "bm25"
                      : retriever == RetrieverKind::recency ? "recency"
                                                            : "dense";
      return std::string("rbp:") + k;
    }
    case VariantKind::adhoc:
      return "adhoc";
  }
  return "pplug";
}

Variant Variant::parse(const std::string& s) {
  Variant v;
  if (s == "pplug") {
    v.kind = VariantKind::pplug;
  } else if (s == "mean") {
    v.kind = VariantKind::pplug_mean;
  } else if (s.rfind("topk", 0) == 0) {
    v.kind = VariantKind::pplug_topk;
    auto colon = s.find(':');
    if (colon != std::string::npos) v.topk = std::stoi(s.substr(colon + 1));
    if (v.topk < 1) throw std::invalid_argument("topk variant needs K >= 1: " + s);
  } else if (s == "retrieval") {
    v.kind = VariantKind::pplug_retrieval;
  } else if (s.rfind("rbp", 0) == 0) {
    v.kind = VariantKind::rbp;
    auto colon = s.find(':');
    std::string kind = colon == std::string::npos ? "bm25" : s.substr(colon + 1);
    if (kind == "bm25")
      v.retriever = RetrieverKind::bm25;
    else if (kind == "recency")
      v.retriever = RetrieverKind::recency;
    else if (kind == "dense")
      v.retriever = RetrieverKind::dense;
    else
      throw std::invalid_argument("unknown retriever kind: " + kind);
  } else if (s == "adhoc") {
    v.kind = VariantKind::adhoc;
  } else {
    throw std::invalid_argument("unknown variant: " + s);
  }
  return v;
}

namespace {

std::vector<ParamView> prefixed(std::vector<ParamView> views, const std::string& prefix) {
  for (auto& v : views) v.name = prefix + v.name;
  return views;
}

std::uint64_t hash_views(const std::vector<ParamView>& views) {
  Fnv1a h;
  for (const auto& v : views) {
    h.update(v.name.data(), v.name.size());
    h.update_f32(v.data, v.size);
  }
  return h.digest();
}

bool uses_persona(VariantKind k) {
  return k == VariantKind::pplug || k == VariantKind::pplug_mean ||
         k == VariantKind::pplug_topk || k == VariantKind::pplug_retrieval;
}

bool uses_input_encoder(VariantKind k) {
  return k == VariantKind::pplug || k == VariantKind::pplug_topk ||
         k == VariantKind::pplug_retrieval;
}

PersonaVariant persona_variant_of(VariantKind k) {
  if (k == VariantKind::pplug_mean) return PersonaVariant::mean;
  if (k == VariantKind::pplug_topk) return PersonaVariant::topk;
  return PersonaVariant::attention;
}

struct InstanceGrads {
  TransformerParams* enc = nullptr;
  ProjectorParams* proj = nullptr;
  Matrix* instr = nullptr;
};

// Full pipeline loss for one instance; backprop into the trainable set when
// grads are provided. The LM and the frozen encoder only ever run forward.
double instance_loss(ModelBundle& b, const TaskInstance& inst, const Variant& var,
                     EmbeddingCache* cache, const InstanceGrads& grads) {
  std::vector<int> y_ids = b.tokenizer.encode(inst.gold_output);
  y_ids.push_back(Tokenizer::kEos);

  std::vector<int> x_ids;
  std::vector<int> demo_ids;
  const std::vector<int>* demo_ptr = nullptr;

  EncodedProfile profile_enc;
  if (uses_persona(var.kind) || var.kind == VariantKind::rbp) {
    if (!inst.profile) throw std::runtime_error("instance " + inst.instance_id + " has no profile");
  }
  if (uses_persona(var.kind) ||
      (var.kind == VariantKind::rbp && var.retriever == RetrieverKind::dense)) {
    profile_enc = encode_profile(b.frozen_encoder, b.tokenizer, *inst.profile, cache);
  }

  if (var.kind == VariantKind::rbp) {
    RetrievalResult r;
    switch (var.retriever) {
      case RetrieverKind::bm25:
        r = bm25_rank(inst.input_text, *inst.profile, var.rbp_k);
        break;
      case RetrieverKind::recency:
        r = recency_rank(*inst.profile, var.rbp_k);
        break;
      case RetrieverKind::dense: {
        Vector xq = encode_text(b.frozen_encoder, b.tokenizer, inst.input_text);
        r = dense_rank(profile_enc, xq, var.rbp_k);
        break;
      }
    }
    std::string prompt = build_rbp_prompt(retrieved_behaviors(*inst.profile, r), inst.input_text);
    x_ids = b.tokenizer.encode(prompt);
  } else {
    x_ids = b.tokenizer.encode(inst.input_text);
  }
  if (x_ids.empty()) x_ids.push_back(Tokenizer::kUnk);

  EncoderTape enc_tape;
  Vector x_vec;
  PersonaTape persona_tape;
  PersonalEmbedding persona;
  const InstructionEmbedding* instr = nullptr;
  const PersonalEmbedding* persona_ptr = nullptr;

  if (uses_persona(var.kind)) {
    instr = &b.instruction;
    const Vector* xp = nullptr;
    if (uses_input_encoder(var.kind)) {
      x_vec = encode_input_forward(b.input_encoder, b.tokenizer, inst.input_text, enc_tape);
      xp = &x_vec;
    }
    persona = persona_forward(profile_enc, xp, b.projector, persona_variant_of(var.kind),
                              var.topk, persona_tape);
    persona_ptr = &persona;

    if (var.kind == VariantKind::pplug_retrieval) {
      Vector xq = encode_text(b.frozen_encoder, b.tokenizer, inst.input_text);
      RetrievalResult r = dense_rank(profile_enc, xq, 1);
      demo_ids = b.tokenizer.encode(inst.profile->behaviors[r.indices.front()].text);
      if (!demo_ids.empty()) demo_ptr = &demo_ids;
    }
  }

  PlugSequence seq = assemble_input(instr, persona_ptr, x_ids, y_ids, demo_ptr, b.lm);

  if (!grads.enc && !grads.proj && !grads.instr) return forward_loss(b.lm, seq);

  Matrix dEmb;
  double loss = forward_loss_backward(b.lm, seq, dEmb);

  // Route embedding grads back into the trainable set.
  Eigen::Index pos = 0;
  Eigen::Index instr_start = -1, persona_pos = -1;
  for (Eigen::Index t = 0; t < static_cast<Eigen::Index>(seq.segments.size()); ++t) {
    if (seq.segments[static_cast<std::size_t>(t)] == Segment::INSTR && instr_start < 0)
      instr_start = t;
    if (seq.segments[static_cast<std::size_t>(t)] == Segment::PERSONA) persona_pos = t;
  }
  (void)pos;
  if (instr && grads.instr && instr_start >= 0)
    *grads.instr += dEmb.middleRows(instr_start, instr->rows.rows());
  if (persona_ptr && grads.proj && persona_pos >= 0) {
    Vector dP = dEmb.row(persona_pos).transpose();
    Vector dx = persona_backward(profile_enc, b.projector, persona_tape, dP, *grads.proj);
    if (uses_input_encoder(var.kind) && grads.enc)
      encode_input_backward(b.input_encoder, enc_tape, dx, *grads.enc);
  }
  return loss;
}

std::vector<ParamView> grad_views(TransformerParams& enc, ProjectorParams& proj, Matrix& instr) {
  std::vector<ParamView> out = prefixed(param_views(enc), "input_enc.");
  for (auto& v : proj.views()) out.push_back(v);
  out.push_back({"instr.rows", instr.data(), static_cast<std::size_t>(instr.size())});
  return out;
}

}  // namespace

std::vector<ParamView> ModelBundle::trainable_views() {
  std::vector<ParamView> out = prefixed(param_views(input_encoder.net), "input_enc.");
  for (auto& v : projector.views()) out.push_back(v);
  for (auto& v : instruction.views()) out.push_back(v);
  return out;
}

std::uint64_t ModelBundle::trainable_hash() { return hash_views(trainable_views()); }

std::uint64_t ModelBundle::frozen_hash() const {
  Fnv1a h;
  std::uint64_t a = params_hash(lm.net);
  std::uint64_t b = params_hash(frozen_encoder.net);
  h.update(&a, sizeof(a));
  h.update(&b, sizeof(b));
  return h.digest();
}

TrainState make_train_state(ModelBundle bundle, const TrainConfig& cfg) {
  TrainState st;
  st.bundle = std::move(bundle);
  st.cfg = cfg;
  st.optimizer = AdamW(0.9, 0.999, 1e-8, cfg.weight_decay);
  st.rng = Rng(cfg.seed);
  return st;
}

TrainReport train(TrainState& state, const DatasetSplit& split, EmbeddingCache* cache,
                  const std::string& loss_csv_path, long stop_after_steps) {
  if (split.instances.empty()) throw std::invalid_argument("train: empty split");
  ModelBundle& b = state.bundle;
  const TrainConfig& cfg = state.cfg;
  const long n = static_cast<long>(split.instances.size());
  const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = steps_per_epoch * cfg.epochs;
  // The schedule always spans the full horizon; an early stop only pauses the
  // run (a later call picks up at steps_done with identical behavior).
  const long stop_at =
      stop_after_steps < 0 ? total_steps : std::min(total_steps, stop_after_steps);

  const std::uint64_t lm_hash0 = b.lm.hash();
  const std::uint64_t enc_hash0 = b.frozen_encoder.hash();
  const bool trains = uses_persona(cfg.variant.kind);

  std::ofstream csv;
  if (!loss_csv_path.empty()) {
    csv.open(loss_csv_path, state.steps_done == 0 ? std::ios::trunc : std::ios::app);
    if (state.steps_done == 0) csv << "step,loss,lr\n";
  }

  TrainReport report;
  report.total_steps = total_steps;
  std::vector<long> perm(static_cast<std::size_t>(n));
  long perm_epoch = -1;

  for (long step = state.steps_done; step < stop_at; ++step) {
    long epoch = step / steps_per_epoch;
    if (epoch != perm_epoch) {
      // Stateless per-epoch permutation keeps resumed runs bit-identical.
      std::iota(perm.begin(), perm.end(), 0);
      Rng perm_rng(cfg.seed ^ splitmix64(0xba7c4 + static_cast<std::uint64_t>(epoch)));
      perm_rng.shuffle(perm);
      perm_epoch = epoch;
    }
    long lo = (step % steps_per_epoch) * cfg.batch_size;
    long hi = std::min<long>(lo + cfg.batch_size, n);

    TransformerParams enc_grads = zeros_like(b.input_encoder.net);
    ProjectorParams proj_grads = b.projector;
    for (auto& v : proj_grads.views()) std::fill(v.data, v.data + v.size, 0.0);
    Matrix instr_grads = Matrix::Zero(b.instruction.rows.rows(), b.instruction.rows.cols());

    double loss = 0.0;
    InstanceGrads g;
    if (trains) {
      g.enc = &enc_grads;
      g.proj = &proj_grads;
      g.instr = &instr_grads;
    }
    for (long i = lo; i < hi; ++i)
      loss += instance_loss(b, split.instances[static_cast<std::size_t>(perm[i])], cfg.variant,
                            cache, g);
    const double inv = 1.0 / static_cast<double>(hi - lo);
    loss *= inv;
    if (!std::isfinite(loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));

    double lr = lr_at(step, total_steps, cfg.learning_rate, cfg.warmup_ratio, cfg.decay);
    if (trains) {
      auto gv = grad_views(enc_grads, proj_grads, instr_grads);
      for (auto& v : gv)
        for (std::size_t k = 0; k < v.size; ++k) v.data[k] *= inv;
      if (cfg.clip_norm > 0) clip_global_norm(gv, cfg.clip_norm);
      state.optimizer.step(b.trainable_views(), gv, lr);
    }

    if (b.lm.hash() != lm_hash0 || b.frozen_encoder.hash() != enc_hash0)
      throw std::runtime_error("train: freeze policy violated at step " + std::to_string(step));

    report.curve.push_back({step, loss, lr});
    report.final_loss = loss;
    if (csv.is_open()) csv << step << ',' << loss << ',' << lr << '\n';
    state.steps_done = step + 1;
  }
  return report;
}

MetricReport evaluate(ModelBundle& b, const DatasetSplit& split, const TaskSpec& spec,
                      const EvalConfig& cfg, EmbeddingCache* cache) {
  if (split.instances.empty()) throw std::invalid_argument("evaluate: empty split");
  auto t0 = std::chrono::steady_clock::now();

  Variant var = cfg.variant;
  if (cfg.topk_override > 0 && uses_persona(var.kind)) {
    var.kind = VariantKind::pplug_topk;
    var.topk = cfg.topk_override;
  }

  std::vector<std::vector<int>> label_ids;
  for (const auto& label : spec.label_set) label_ids.push_back(b.tokenizer.encode(label));

  std::ofstream preds;
  if (!cfg.predictions_path.empty()) preds.open(cfg.predictions_path, std::ios::trunc);

  std::vector<LabeledPair> pairs;
  for (const auto& inst : split.instances) {
    std::vector<int> x_ids;
    std::vector<int> demo_ids;
    const std::vector<int>* demo_ptr = nullptr;

    EncodedProfile profile_enc;
    if (uses_persona(var.kind) ||
        (var.kind == VariantKind::rbp && var.retriever == RetrieverKind::dense)) {
      profile_enc = encode_profile(b.frozen_encoder, b.tokenizer, *inst.profile, cache);
    }
    if (var.kind == VariantKind::rbp) {
      RetrievalResult r;
      switch (var.retriever) {
        case RetrieverKind::bm25:
          r = bm25_rank(inst.input_text, *inst.profile, var.rbp_k);
          break;
        case RetrieverKind::recency:
          r = recency_rank(*inst.profile, var.rbp_k);
          break;
        case RetrieverKind::dense: {
          Vector xq = encode_text(b.frozen_encoder, b.tokenizer, inst.input_text);
          r = dense_rank(profile_enc, xq, var.rbp_k);
          break;
        }
      }
      x_ids = b.tokenizer.encode(
          build_rbp_prompt(retrieved_behaviors(*inst.profile, r), inst.input_text));
    } else {
      x_ids = b.tokenizer.encode(inst.input_text);
    }
    if (x_ids.empty()) x_ids.push_back(Tokenizer::kUnk);

    const InstructionEmbedding* instr = nullptr;
    PersonalEmbedding persona;
    const PersonalEmbedding* persona_ptr = nullptr;
    if (uses_persona(var.kind)) {
      instr = &b.instruction;
      PersonaTape tape;
      Vector x_vec;
      const Vector* xp = nullptr;
      if (uses_input_encoder(var.kind)) {
        EncoderTape et;
        x_vec = encode_input_forward(b.input_encoder, b.tokenizer, inst.input_text, et);
        xp = &x_vec;
      }
      persona =
          persona_forward(profile_enc, xp, b.projector, persona_variant_of(var.kind), var.topk,
                          tape);
      persona_ptr = &persona;
      if (var.kind == VariantKind::pplug_retrieval) {
        Vector xq = encode_text(b.frozen_encoder, b.tokenizer, inst.input_text);
        RetrievalResult r = dense_rank(profile_enc, xq, 1);
        demo_ids = b.tokenizer.encode(inst.profile->behaviors[r.indices.front()].text);
        if (!demo_ids.empty()) demo_ptr = &demo_ids;
      }
    }

    PlugSequence prefix = assemble_input(instr, persona_ptr, x_ids, {}, demo_ptr, b.lm);
    std::string prediction;
    if (spec.is_generation) {
      BeamConfig bc;
      bc.beam_size = cfg.beam_size;
      bc.max_new_tokens = cfg.max_new_tokens;
      prediction = b.tokenizer.decode(generate_beam(b.lm, prefix, bc));
    } else {
      LabelScore score = score_labels(b.lm, prefix, label_ids);
      prediction = spec.label_set[static_cast<std::size_t>(score.chosen)];
    }
    pairs.push_back({prediction, inst.gold_output});
    if (preds.is_open()) {
      json j = {{"id", inst.instance_id}, {"prediction", prediction}, {"gold", inst.gold_output}};
      preds << j.dump() << '\n';
    }
  }

  MetricReport report;
  report.instance_count = static_cast<long>(pairs.size());
  report.variant = cfg.variant.to_string();
  report.split = split.name;
  if (spec.is_generation) {
    double r1 = 0.0, rl = 0.0;
    for (const auto& p : pairs) {
      auto r = rouge_metrics(p.prediction, p.gold);
      r1 += r.rouge1_f;
      rl += r.rougeL_f;
    }
    report.values["rouge1"] = r1 / static_cast<double>(pairs.size());
    report.values["rougeL"] = rl / static_cast<double>(pairs.size());
  } else {
    auto cm = classification_metrics(pairs, spec.label_set);
    report.values["accuracy"] = cm.accuracy;
    report.values["macro_f1"] = cm.macro_f1;
    if (spec.task_id == "lamp3") {
      auto rm = regression_metrics(pairs);
      report.values["mae"] = rm.mae;
      report.values["rmse"] = rm.rmse;
    }
  }
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_metric_report(const MetricReport& report, const std::string& path) {
  json j;
  for (const auto& [k, v] : report.values) j[k] = v;
  j["instance_count"] = report.instance_count;
  j["variant"] = report.variant;
  j["split"] = report.split;
  j["wall_clock_sec"] = report.wall_clock_sec;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("write_metric_report: cannot open " + path);
  os << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

ModelBundle tiny_bundle(std::uint64_t seed) {
  std::vector<std::string> corpus = {"a b c d", "e f g a", "b d f", "c e g"};
  ModelBundle b;
  b.tokenizer = Tokenizer::build(corpus, 11);
  Rng rng(seed);
  EncoderConfig ec;
  ec.d_enc = 4;
  ec.num_layers = 2;
  ec.num_heads = 2;
  ec.ffn_width = 8;
  ec.max_len = 16;
  ec.vocab_size = b.tokenizer.size();
  b.frozen_encoder = init_encoder(ec, rng);
  b.input_encoder = clone_params(b.frozen_encoder);
  // Perturb the clone so the two encoders are not identical.
  Rng prng(seed ^ 0x77);
  for (auto& v : param_views(b.input_encoder.net))
    for (std::size_t i = 0; i < v.size; ++i)
      v.data[i] = round_f32(v.data[i] + 0.01 * prng.normal());
  b.projector = init_projector(4, 8, rng);
  b.instruction = init_instruction(1, 8, rng);
  LMConfig lc;
  lc.d_lm = 8;
  lc.num_layers = 2;
  lc.num_heads = 2;
  lc.ffn_width = 16;
  lc.max_len = 32;
  lc.vocab_size = b.tokenizer.size();
  b.lm = init_lm(lc, rng);
  return b;
}

TaskInstance tiny_instance() {
  auto profile = std::make_shared<UserProfile>();
  profile->user_id = "gc";
  profile->behaviors = {{"b0", "a b", 0, {}}, {"b1", "c d", 1, {}}, {"b2", "e f", 2, {}}};
  TaskInstance inst;
  inst.instance_id = "gc-0";
  inst.task_id = "synth";
  inst.input_text = "a c e";
  inst.gold_output = "b";
  inst.profile = profile;
  return inst;
}

}  // namespace

double grad_check(GradComponent component, double eps, std::uint64_t seed) {
  ModelBundle b = tiny_bundle(seed);
  TaskInstance inst = tiny_instance();
  Variant var;  // pplug

  TransformerParams enc_grads = zeros_like(b.input_encoder.net);
  ProjectorParams proj_grads = b.projector;
  for (auto& v : proj_grads.views()) std::fill(v.data, v.data + v.size, 0.0);
  Matrix instr_grads = Matrix::Zero(b.instruction.rows.rows(), b.instruction.rows.cols());
  InstanceGrads g{&enc_grads, &proj_grads, &instr_grads};
  instance_loss(b, inst, var, nullptr, g);

  auto loss_at = [&]() { return instance_loss(b, inst, var, nullptr, InstanceGrads{}); };

  std::vector<std::pair<double*, double*>> coords;  // (param, analytic grad)
  auto pair_views = [&](std::vector<ParamView> pv, std::vector<ParamView> gv) {
    for (std::size_t k = 0; k < pv.size(); ++k)
      for (std::size_t i = 0; i < pv[k].size; ++i)
        coords.emplace_back(pv[k].data + i, gv[k].data + i);
  };
  switch (component) {
    case GradComponent::projector:
      pair_views(b.projector.views(), proj_grads.views());
      break;
    case GradComponent::instruction:
      pair_views(b.instruction.views(), {{"instr.rows", instr_grads.data(),
                                          static_cast<std::size_t>(instr_grads.size())}});
      break;
    case GradComponent::input_encoder: {
      // Top layer only (full-depth FD would be slow and adds nothing).
      auto pv = param_views(b.input_encoder.net);
      auto gv = param_views(enc_grads);
      std::string want = "layer" + std::to_string(b.input_encoder.cfg.num_layers - 1) + ".";
      std::vector<ParamView> ps, gs;
      for (std::size_t k = 0; k < pv.size(); ++k) {
        if (pv[k].name.rfind(want, 0) == 0) {
          ps.push_back(pv[k]);
          gs.push_back(gv[k]);
        }
      }
      pair_views(ps, gs);
      break;
    }
  }

  double max_rel = 0.0;
  for (auto& [p, a] : coords) {
    double orig = *p;
    *p = orig + eps;
    double lp = loss_at();
    *p = orig - eps;
    double lm = loss_at();
    *p = orig;
    double fd = (lp - lm) / (2.0 * eps);
    double denom = std::max(1e-6, std::abs(fd) + std::abs(*a));
    max_rel = std::max(max_rel, std::abs(fd - *a) / denom);
  }
  return max_rel;
}

// ---------------------------------------------------------------------------
// Checkpointing

namespace {

constexpr int kSchemaVersion = 1;

json encoder_cfg_json(const EncoderConfig& c) {
  return {{"d_enc", c.d_enc},           {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"ffn_width", c.ffn_width},
          {"max_len", c.max_len},       {"vocab_size", c.vocab_size},
          {"pooling", c.pooling == Pooling::mean ? "mean" : "first_token"},
          {"l2_normalize", c.l2_normalize}};
}

EncoderConfig encoder_cfg_from_json(const json& j) {
  EncoderConfig c;
  c.d_enc = j.at("d_enc");
  c.num_layers = j.at("num_layers");
  c.num_heads = j.at("num_heads");
  c.ffn_width = j.at("ffn_width");
  c.max_len = j.at("max_len");
  c.vocab_size = j.at("vocab_size");
  c.pooling = j.at("pooling") == "mean" ? Pooling::mean : Pooling::first_token;
  c.l2_normalize = j.at("l2_normalize");
  return c;
}

json lm_cfg_json(const LMConfig& c) {
  return {{"d_lm", c.d_lm},           {"num_layers", c.num_layers},
          {"num_heads", c.num_heads}, {"ffn_width", c.ffn_width},
          {"max_len", c.max_len},     {"vocab_size", c.vocab_size}};
}

LMConfig lm_cfg_from_json(const json& j) {
  LMConfig c;
  c.d_lm = j.at("d_lm");
  c.num_layers = j.at("num_layers");
  c.num_heads = j.at("num_heads");
  c.ffn_width = j.at("ffn_width");
  c.max_len = j.at("max_len");
  c.vocab_size = j.at("vocab_size");
  return c;
}

json train_cfg_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"warmup_ratio", c.warmup_ratio},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"decay", c.decay == DecayMode::linear ? "linear" : "constant"},
          {"seed", c.seed},
          {"variant", c.variant.to_string()}};
}

TrainConfig train_cfg_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate");
  c.warmup_ratio = j.at("warmup_ratio");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.weight_decay = j.at("weight_decay");
  c.clip_norm = j.at("clip_norm");
  c.decay = j.at("decay") == "linear" ? DecayMode::linear : DecayMode::constant;
  c.seed = j.at("seed");
  c.variant = Variant::parse(j.at("variant"));
  return c;
}

// Every persisted array, in blob order.
std::vector<ParamView> all_views(TrainState& st) {
  ModelBundle& b = st.bundle;
  std::vector<ParamView> out = prefixed(param_views(b.frozen_encoder.net), "frozen_enc.");
  for (auto& v : prefixed(param_views(b.input_encoder.net), "input_enc.")) out.push_back(v);
  for (auto& v : b.projector.views()) out.push_back(v);
  for (auto& v : b.instruction.views()) out.push_back(v);
  for (auto& v : prefixed(param_views(b.lm.net), "lm.")) out.push_back(v);
  for (auto& [name, m] : st.optimizer.moments_m())
    out.push_back({"opt.m." + name, m.data(), m.size()});
  for (auto& [name, m] : st.optimizer.moments_v())
    out.push_back({"opt.v." + name, m.data(), m.size()});
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& dir) {
  TrainState& st = const_cast<TrainState&>(state);
  std::filesystem::create_directories(dir);

  std::vector<char> blob;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& v : all_views(st)) {
    entries.push_back({{"name", v.name}, {"offset", offset}, {"count", v.size}});
    for (std::size_t i = 0; i < v.size; ++i) {
      float f = static_cast<float>(v.data[i]);
      const char* p = reinterpret_cast<const char*>(&f);
      blob.insert(blob.end(), p, p + sizeof(float));
    }
    offset += v.size;
  }
  Fnv1a digest;
  digest.update(blob.data(), blob.size());

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["digest"] = hex64(digest.digest());
  manifest["steps_done"] = st.steps_done;
  manifest["opt_step"] = st.optimizer.step_count();
  manifest["rng_state"] = st.rng.serialize();
  manifest["train_cfg"] = train_cfg_json(st.cfg);
  manifest["frozen_encoder_cfg"] = encoder_cfg_json(st.bundle.frozen_encoder.cfg);
  manifest["input_encoder_cfg"] = encoder_cfg_json(st.bundle.input_encoder.cfg);
  manifest["lm_cfg"] = lm_cfg_json(st.bundle.lm.cfg);
  manifest["projector"] = {{"d_enc", st.bundle.projector.d_enc()},
                           {"d_hidden", st.bundle.projector.d_hidden()},
                           {"d_lm", st.bundle.projector.d_lm()}};
  manifest["instruction"] = {{"m", st.bundle.instruction.rows.rows()},
                             {"d_lm", st.bundle.instruction.rows.cols()}};
  manifest["params"] = std::move(entries);
  manifest["tokenizer"] = "tokenizer.txt";

  std::ofstream mf(dir + "/manifest.json", std::ios::binary | std::ios::trunc);
  mf << manifest.dump(2) << '\n';
  std::ofstream pf(dir + "/params.bin", std::ios::binary | std::ios::trunc);
  pf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!mf || !pf) throw std::runtime_error("save_checkpoint: write failure in " + dir);
  st.bundle.tokenizer.save(dir + "/tokenizer.txt");
}

TrainState load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json", std::ios::binary);
  if (!mf) throw std::runtime_error("load_checkpoint: cannot open manifest in " + dir);
  json manifest;
  mf >> manifest;
  if (manifest.at("schema_version") != kSchemaVersion)
    throw std::runtime_error("load_checkpoint: unsupported schema version");

  std::ifstream pf(dir + "/params.bin", std::ios::binary);
  if (!pf) throw std::runtime_error("load_checkpoint: cannot open params.bin");
  std::vector<char> blob((std::istreambuf_iterator<char>(pf)), std::istreambuf_iterator<char>());
  Fnv1a digest;
  digest.update(blob.data(), blob.size());
  if (hex64(digest.digest()) != manifest.at("digest").get<std::string>())
    throw std::runtime_error("load_checkpoint: digest mismatch (corrupt params.bin)");

  TrainState st;
  st.cfg = train_cfg_from_json(manifest.at("train_cfg"));
  st.steps_done = manifest.at("steps_done");
  st.bundle.tokenizer = Tokenizer::load(dir + "/" + manifest.at("tokenizer").get<std::string>());

  Rng dummy(0);
  st.bundle.frozen_encoder =
      init_encoder(encoder_cfg_from_json(manifest.at("frozen_encoder_cfg")), dummy);
  st.bundle.input_encoder =
      init_encoder(encoder_cfg_from_json(manifest.at("input_encoder_cfg")), dummy);
  st.bundle.lm = init_lm(lm_cfg_from_json(manifest.at("lm_cfg")), dummy);
  const auto& pj = manifest.at("projector");
  st.bundle.projector = init_projector(pj.at("d_enc"), pj.at("d_lm"), dummy, pj.at("d_hidden"));
  const auto& ij = manifest.at("instruction");
  st.bundle.instruction = init_instruction(ij.at("m"), ij.at("d_lm"), dummy);
  st.optimizer = AdamW(0.9, 0.999, 1e-8, st.cfg.weight_decay);
  st.optimizer.set_step_count(manifest.at("opt_step"));
  st.rng = Rng(0);
  st.rng.deserialize(manifest.at("rng_state"));

  // Moment arrays must exist before all_views enumerates them.
  for (const auto& e : manifest.at("params")) {
    std::string name = e.at("name");
    std::size_t count = e.at("count");
    if (name.rfind("opt.m.", 0) == 0) st.optimizer.moments_m()[name.substr(6)].resize(count);
    if (name.rfind("opt.v.", 0) == 0) st.optimizer.moments_v()[name.substr(6)].resize(count);
  }

  auto views = all_views(st);
  std::size_t vi = 0;
  for (const auto& e : manifest.at("params")) {
    if (vi >= views.size()) throw std::runtime_error("load_checkpoint: extra manifest entries");
    auto& v = views[vi++];
    if (v.name != e.at("name").get<std::string>() || v.size != e.at("count").get<std::size_t>())
      throw std::runtime_error("load_checkpoint: manifest/param mismatch at " + v.name);
    std::size_t offset = e.at("offset");
    if ((offset + v.size) * sizeof(float) > blob.size())
      throw std::runtime_error("load_checkpoint: truncated params.bin at " + v.name);
    const float* f = reinterpret_cast<const float*>(blob.data()) + offset;
    for (std::size_t i = 0; i < v.size; ++i) v.data[i] = static_cast<double>(f[i]);
  }
  if (vi != views.size()) throw std::runtime_error("load_checkpoint: missing manifest entries");
  return st;
}

}  // namespace pplug
