#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pplug/data.hpp"
#include "pplug/encoder.hpp"

using namespace pplug;

namespace {

std::vector<std::string> fixture_corpus() {
  return {"the quick brown fox jumps over the lazy dog",
          "a stitch in time saves nine",
          "the early bird catches the worm",
          "brown dog and quick fox",
          "time and time again the dog barks"};
}

Tokenizer fixture_tokenizer() { return Tokenizer::build(fixture_corpus(), 32); }

EncoderParams fixture_encoder(const Tokenizer& tok, int max_len = 64) {
  EncoderConfig cfg;
  cfg.d_enc = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.ffn_width = 32;
  cfg.max_len = max_len;
  cfg.vocab_size = tok.size();
  Rng rng(42);
  return init_encoder(cfg, rng);
}

UserProfile fixture_profile() {
  UserProfile p;
  p.user_id = "u0";
  p.behaviors = {{"b0", "the quick brown fox", 1, {}},
                 {"b1", "a stitch in time", 2, {}},
                 {"b2", "the early bird", 3, {}},
                 {"b3", "brown dog", 4, {}},
                 {"b4", "time and time again", 5, {}}};
  return p;
}

std::string temp_dir(const char* tag) {
  auto d = std::filesystem::temp_directory_path() / (std::string("pplug_enc_") + tag);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d.string();
}

}  // namespace

TEST_CASE("encode_text: output width, determinism, finiteness") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams enc = fixture_encoder(tok);
  for (const std::string& text : {std::string("dog"), std::string("the quick brown fox"),
                                  std::string(""), std::string("zzz unknown words only")}) {
    Vector v1 = encode_text(enc, tok, text);
    Vector v2 = encode_text(enc, tok, text);
    CHECK(v1.size() == 16);
    CHECK(v1.allFinite());
    CHECK((v1 - v2).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("encode_text: truncation makes content beyond max_len invisible") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams enc = fixture_encoder(tok, /*max_len=*/8);
  // 12-token text vs its first 8 tokens: identical encodings.
  std::string long_text = "the quick brown fox jumps over the lazy dog time bird worm";
  std::vector<std::string> pieces = Tokenizer::split(long_text);
  REQUIRE(pieces.size() == 12);
  std::string head;
  for (std::size_t i = 0; i < 8; ++i) head += (i ? " " : "") + pieces[i];
  Vector a = encode_text(enc, tok, long_text);
  Vector b = encode_text(enc, tok, head);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  // And differs from a genuinely shorter prefix.
  Vector c = encode_text(enc, tok, pieces[0]);
  CHECK((a - c).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("encode_profile: shape, cache equivalence, zero forwards on warm cache") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams enc = fixture_encoder(tok);
  UserProfile prof = fixture_profile();

  EncodedProfile plain = encode_profile(enc, tok, prof, nullptr);
  CHECK(plain.rows.rows() == 5);
  CHECK(plain.rows.cols() == 16);
  CHECK(plain.behavior_ids.size() == 5);
  CHECK(plain.rows.allFinite());

  EmbeddingCache cache;
  EncodedProfile cold = encode_profile(enc, tok, prof, &cache);
  CHECK((cold.rows - plain.rows).cwiseAbs().maxCoeff() == 0.0);
  CHECK(cache.size() == 5);

  reset_encoder_forward_count();
  EncodedProfile warm = encode_profile(enc, tok, prof, &cache);
  CHECK(encoder_forward_count() == 0);
  CHECK((warm.rows - plain.rows).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("encode_profile: stale cache entries are recomputed, fresh hash recorded") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams enc = fixture_encoder(tok);
  UserProfile prof = fixture_profile();
  EmbeddingCache cache;
  EncodedProfile first = encode_profile(enc, tok, prof, &cache);
  CHECK(first.producer_hash == enc.hash());

  EncoderParams other = clone_params(enc);
  other.net.tok_emb(0, 0) += 1.0;
  REQUIRE(other.hash() != enc.hash());
  reset_encoder_forward_count();
  EncodedProfile recomputed = encode_profile(other, tok, prof, &cache);
  CHECK(encoder_forward_count() == 5);  // every row recomputed, none served stale
  CHECK(recomputed.producer_hash == other.hash());
  // Old entries still hit under the old params.
  reset_encoder_forward_count();
  encode_profile(enc, tok, prof, &cache);
  CHECK(encoder_forward_count() == 0);
}

TEST_CASE("embedding cache: bitwise hits and disk roundtrip") {
  EmbeddingCache cache;
  Vector v(3);
  v << 0.25, -1.5, 3.0;  // exactly representable in f32
  cache.put("u", "b", 77, v);
  auto hit = cache.get("u", "b", 77);
  REQUIRE(hit.has_value());
  CHECK((*hit - v).cwiseAbs().maxCoeff() == 0.0);
  CHECK_FALSE(cache.get("u", "b", 78).has_value());
  CHECK_FALSE(cache.get("u", "other", 77).has_value());

  std::string dir = temp_dir("cache");
  cache.save(dir);
  EmbeddingCache back = EmbeddingCache::load(dir);
  CHECK(back.size() == 1);
  auto hit2 = back.get("u", "b", 77);
  REQUIRE(hit2.has_value());
  CHECK((*hit2 - v).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("clone_params: equality at creation, isolation afterwards") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams src = fixture_encoder(tok);
  EncoderParams copy = clone_params(src);
  CHECK(copy.hash() == src.hash());
  EncoderParams copy2 = clone_params(copy);
  CHECK(copy2.hash() == src.hash());

  std::uint64_t before = src.hash();
  copy.net.layers[0].Wq(0, 0) += 0.5;
  copy.net.tok_emb(1, 1) -= 0.25;
  CHECK(src.hash() == before);
  CHECK(copy.hash() != before);
}

TEST_CASE("pretrain_encoder: improves on uniform guessing, deterministic, updates params") {
  std::vector<std::string> corpus;
  // Repetitive corpus so a short run learns something.
  for (int i = 0; i < 12; ++i)
    for (const auto& s : fixture_corpus()) corpus.push_back(s);
  Tokenizer tok = Tokenizer::build(corpus, 32);
  EncoderConfig cfg;
  cfg.d_enc = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.ffn_width = 32;
  cfg.max_len = 32;
  cfg.vocab_size = tok.size();

  EncoderPretrainConfig pc;
  pc.steps = 120;
  pc.seed = 9;
  EncoderPretrainReport rep1;
  EncoderParams a = pretrain_encoder(corpus, tok, cfg, pc, &rep1);
  CHECK(rep1.holdout_masked_accuracy > 1.0 / tok.size());
  CHECK(std::isfinite(rep1.final_loss));

  EncoderParams b = pretrain_encoder(corpus, tok, cfg, pc, nullptr);
  CHECK(a.hash() == b.hash());

  Rng rng(42);
  EncoderParams fresh = init_encoder(cfg, rng);
  CHECK(a.hash() != fresh.hash());
}

TEST_CASE("encode_input_forward matches encode_text and backward fills gradients") {
  Tokenizer tok = fixture_tokenizer();
  EncoderParams enc = fixture_encoder(tok);
  EncoderTape tape;
  Vector fwd = encode_input_forward(enc, tok, "the quick brown fox", tape);
  Vector ref = encode_text(enc, tok, "the quick brown fox");
  // The cached path rounds to f32; the training path is full precision.
  for (Eigen::Index i = 0; i < fwd.size(); ++i)
    CHECK(std::abs(round_f32(fwd(i)) - ref(i)) == 0.0);

  TransformerParams grads = zeros_like(enc.net);
  Vector d_out = Vector::Ones(fwd.size());
  encode_input_backward(enc, tape, d_out, grads);
  double total = 0.0;
  for (const auto& v : param_views(grads))
    for (std::size_t i = 0; i < v.size; ++i) total += std::abs(v.data[i]);
  CHECK(total > 0.0);
}
