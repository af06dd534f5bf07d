#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "mhelab/gradcheck.hpp"
#include "mhelab/model.hpp"

using namespace mhelab;
using AV = AttentionVariant;

namespace {

ModelConfig tiny_decoder(AV v, std::uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.arch = Arch::decoder_only;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 16;
  cfg.variant = v;
  cfg.seed = seed;
  return cfg;
}

std::vector<std::int32_t> random_tokens(std::size_t n, std::int32_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> dist(0, vocab - 1);
  std::vector<std::int32_t> out(n);
  for (auto& t : out) t = dist(rng);
  return out;
}

template <typename T>
void zero_params(Model<T>& m) {
  for (auto& [name, t] : m.parameters())
    for (std::size_t i = 0; i < t.numel(); ++i) t.mut(i) = T(0);
}

}  // namespace

TEST_CASE("build_model attention parameter counts") {
  ModelConfig cfg;
  cfg.arch = Arch::decoder_only;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab_size = 16;
  cfg.max_seq_len = 8;
  cfg.variant = AV::mhe_mul;
  const Model<float> mhe(cfg);
  CHECK(mhe.attention_qkv_params() == 864);  // 2 * (3*16*8 + 3*2*8)

  cfg.variant = AV::mha;
  const Model<float> mha(cfg);
  CHECK(mha.attention_qkv_params() == 1536);  // 2 * 3 * d^2 * n^2

  ModelConfig bad = cfg;
  bad.model_dim = 17;
  CHECK_THROWS_AS(Model<float>{bad}, ConfigError);
  bad = cfg;
  bad.vocab_size = 1;
  CHECK_THROWS_AS(Model<float>{bad}, ConfigError);
}

TEST_CASE("same seed twice gives the identical initial loss") {
  const auto cfg = tiny_decoder(AV::skv, 42);
  Model<float> a(cfg), b(cfg);
  const auto tokens = random_tokens(2 * cfg.max_seq_len, 16, 7);
  std::vector<std::int32_t> targets(tokens.size(), 3);
  std::vector<float> weights(tokens.size(), 1.f);
  const auto la = cross_entropy_rows(a.logits(tokens, 2), targets, weights);
  const auto lb = cross_entropy_rows(b.logits(tokens, 2), targets, weights);
  CHECK(la.at(0) == lb.at(0));
}

TEST_CASE("adamw_step unit behavior") {
  SUBCASE("zero gradient and zero weight decay leave parameters unchanged") {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0};
    adamw_step<double>(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
  }
  SUBCASE("first step moves by -lr for unit gradient") {
    std::vector<double> p{0.5}, g{1.0}, m{0.0}, v{0.0};
    adamw_step<double>(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-12, 0.0);
    // bias-corrected mhat = vhat = 1, so the update is -lr/(1+eps).
    CHECK(p[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-9));
  }
  SUBCASE("decoupled decay multiplies by (1 - lr*wd)") {
    std::vector<double> p{2.0}, g{0.0}, m{0.0}, v{0.0};
    adamw_step<double>(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.01);
    CHECK(p[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-12));
  }
  SUBCASE("state shape mismatch is rejected") {
    std::vector<double> p{1.0, 2.0}, g{1.0}, m{0.0, 0.0}, v{0.0, 0.0};
    CHECK_THROWS_AS(adamw_step<double>(p, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0), DimError);
    CHECK_THROWS_AS(
        adamw_step<double>(p, std::vector<double>{1.0, 1.0}, m, v, 0, 0.1, 0.9, 0.999, 1e-8, 0.0),
        ContractError);
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig tc;
  tc.steps = 100;
  tc.warmup_steps = 10;
  tc.lr = 1.0;
  tc.schedule = LrSchedule::linear;
  CHECK(lr_at(tc, 0) == doctest::Approx(0.1));
  CHECK(lr_at(tc, 9) == doctest::Approx(1.0));
  CHECK(lr_at(tc, 10) == doctest::Approx(1.0));
  CHECK(lr_at(tc, 55) == doctest::Approx(0.5));
  CHECK(lr_at(tc, 99) > 0.0);
  tc.schedule = LrSchedule::constant;
  CHECK(lr_at(tc, 5) == doctest::Approx(0.6));
  CHECK(lr_at(tc, 70) == doctest::Approx(1.0));
}

TEST_CASE("train: zero steps is a no-op") {
  auto cfg = tiny_decoder(AV::mha, 3);
  Model<float> model(cfg);
  const auto before = model.tok_emb.at(0);
  CopyTaskSource data(16, 8, 1);
  TrainConfig tc;
  tc.steps = 0;
  const auto report = train(model, data, tc);
  CHECK(report.loss_curve.empty());
  CHECK(model.tok_emb.at(0) == before);
}

TEST_CASE("train: copy task loss decreases") {
  auto cfg = tiny_decoder(AV::mhe_mul, 0);
  Model<float> model(cfg);
  CopyTaskSource data(16, 8, 123);
  TrainConfig tc;
  tc.steps = 80;
  tc.batch_size = 16;
  tc.lr = 1e-3;
  tc.warmup_steps = 10;
  const auto report = train(model, data, tc);
  REQUIRE(report.loss_curve.size() == 80);
  double head = 0, tail = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += report.loss_curve[i].second;
    tail += report.loss_curve[70 + i].second;
  }
  CHECK(tail < head);
  CHECK(report.tokens_seen == 80 * 16 * 16);
  CHECK(std::isfinite(report.final_loss));
}

TEST_CASE("train: dropout knob stays finite and changes the trajectory") {
  auto cfg = tiny_decoder(AV::mqa, 4);
  cfg.dropout = 0.1;
  Model<float> with_dropout(cfg);
  cfg.dropout = 0.0;
  Model<float> without(cfg);
  CopyTaskSource d1(16, 8, 5), d2(16, 8, 5);
  TrainConfig tc;
  tc.steps = 12;
  tc.batch_size = 8;
  const auto r1 = train(with_dropout, d1, tc);
  const auto r2 = train(without, d2, tc);
  for (const auto& [step, loss] : r1.loss_curve) CHECK(std::isfinite(loss));
  CHECK(r1.loss_curve.back().second != r2.loss_curve.back().second);
}

TEST_CASE("train: objective and architecture must agree") {
  auto cfg = tiny_decoder(AV::mha, 3);
  Model<float> model(cfg);
  CopyTaskSource data(16, 8, 1);
  TrainConfig tc;
  tc.objective = Objective::mlm;
  CHECK_THROWS_AS(train(model, data, tc), ContractError);
}

TEST_CASE("train: non-finite loss aborts with diagnostics") {
  auto cfg = tiny_decoder(AV::mha, 3);
  Model<float> model(cfg);
  model.tok_emb.mut(0) = std::nanf("");
  CopyTaskSource data(16, 8, 1);
  TrainConfig tc;
  tc.steps = 3;
  try {
    train(model, data, tc);
    FAIL("expected DivergedError");
  } catch (const DivergedError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("lr=") != std::string::npos);
  }
}

TEST_CASE("mlm loss at initialization is close to ln(vocab)") {
  ModelConfig cfg;
  cfg.arch = Arch::encoder_only;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab_size = 50;
  cfg.max_seq_len = 32;
  cfg.variant = AV::mhe_add;
  cfg.seed = 5;
  Model<float> model(cfg);
  TokenStreamSource data(random_tokens(4096, 49, 11));  // id 49 reserved as [MASK]
  TrainConfig tc;
  tc.steps = 4;
  tc.batch_size = 8;
  tc.lr = 1e-9;  // effectively measure, not train
  tc.objective = Objective::mlm;
  const auto report = train(model, data, tc);
  const double expected = std::log(50.0);
  for (const auto& [step, loss] : report.loss_curve)
    CHECK(std::abs(loss - expected) / expected < 0.10);
}

TEST_CASE("decoder logits are independent of future tokens") {
  for (AV v : kAllVariants) {
    auto cfg = tiny_decoder(v, 17);
    Model<double> model(cfg);
    const std::size_t L = 10;
    auto tokens = random_tokens(L, 16, 23);
    const auto base = model.logits(tokens, 1);
    for (std::size_t t = 0; t + 1 < L; ++t) {
      auto perturbed = tokens;
      for (std::size_t s = t + 1; s < L; ++s) perturbed[s] = (perturbed[s] + 5) % 16;
      const auto got = model.logits(perturbed, 1);
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < 16; ++c) {
          INFO(std::string(variant_name(v)), " row ", r, " after perturbing > ", t);
          CHECK(std::abs(got.at(r, c) - base.at(r, c)) < 1e-12);
        }
    }
  }
}

TEST_CASE("end-to-end gradients: 20 sampled parameters per variant") {
  for (AV v : kAllVariants) {
    ModelConfig cfg;
    cfg.arch = Arch::decoder_only;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.head_dim = 2;
    cfg.vocab_size = 5;
    cfg.max_seq_len = 4;
    cfg.variant = v;
    cfg.seed = 31;
    Model<double> model(cfg);
    const auto tokens = random_tokens(4, 5, 77);
    std::vector<std::int32_t> targets{1, 4, 0, 2};
    std::vector<double> weights{1, 1, 1, 0};
    auto loss = [&] { return cross_entropy_rows(model.logits(tokens, 1), targets, weights); };
    gradcheck::Options opt;
    opt.total_samples = 20;
    opt.seed = 9;
    const auto res = gradcheck::check(loss, model.parameters(), opt);
    for (const auto& r : res) {
      INFO(std::string(variant_name(v)), "/", r.name, " ", r.worst_entry);
      CHECK(r.ok);
    }
  }
}

TEST_CASE("uniform model perplexity equals vocab size") {
  auto cfg = tiny_decoder(AV::sha, 1);
  Model<float> model(cfg);
  zero_params(model);
  const auto text = random_tokens(200, 16, 3);
  const double ppl = evaluate_perplexity(model, text, 4, 8);
  CHECK(ppl == doctest::Approx(16.0).epsilon(1e-9));
}

TEST_CASE("stride == window scores every token once") {
  auto cfg = tiny_decoder(AV::mqa, 9);
  Model<float> model(cfg);
  const auto text = random_tokens(203, 16, 5);
  const auto rep = evaluate_perplexity_detailed(model, text, 16, 16);
  CHECK(rep.scored_tokens == text.size() - 1);
  // Overlapping windows keep the accounting identity too.
  const auto rep2 = evaluate_perplexity_detailed(model, text, 4, 16);
  CHECK(rep2.scored_tokens == text.size() - 1);
  CHECK(rep2.windows > rep.windows);
}

TEST_CASE("strided perplexity matches a per-window rescoring oracle") {
  auto cfg = tiny_decoder(AV::mhe_add, 21);
  Model<double> model(cfg);
  const std::size_t stride = 4, window = 8;
  const auto text = random_tokens(300, 16, 13);

  // Oracle: walk the same advancing windows, but score each target token by
  // feeding the model its context prefix from scratch and reading the last
  // logits row.
  double nll = 0;
  std::size_t count = 0;
  std::size_t b = 0, e = std::min(window, text.size());
  std::size_t t_lo = 1, t_hi = std::min(e, text.size() - 1);
  while (true) {
    for (std::size_t t = t_lo; t <= t_hi; ++t) {
      std::vector<std::int32_t> prefix(text.begin() + b, text.begin() + t);
      const auto logits = model.logits(prefix, 1);
      const std::size_t last = prefix.size() - 1;
      double mx = logits.at(last, 0);
      for (std::size_t j = 1; j < 16; ++j) mx = std::max(mx, logits.at(last, j));
      double se = 0;
      for (std::size_t j = 0; j < 16; ++j) se += std::exp(logits.at(last, j) - mx);
      nll += mx + std::log(se) - logits.at(last, static_cast<std::size_t>(text[t]));
      ++count;
    }
    if (t_hi == text.size() - 1) break;
    b += stride;
    e = std::min(b + window, text.size());
    t_lo = t_hi + 1;
    t_hi = std::min(e, text.size() - 1);
  }
  const double want = std::exp(nll / static_cast<double>(count));

  const auto rep = evaluate_perplexity_detailed(model, text, stride, window);
  CHECK(rep.scored_tokens == count);
  CHECK(std::abs(rep.ppl - want) < 1e-9);
}

TEST_CASE("perplexity is identical across thread counts") {
  auto cfg = tiny_decoder(AV::mha, 33);
  Model<float> model(cfg);
  const auto text = random_tokens(400, 16, 29);
  const double p1 = evaluate_perplexity(model, text, 8, 16, 1);
  const double p3 = evaluate_perplexity(model, text, 8, 16, 3);
  CHECK(p1 == p3);
}

TEST_CASE("perplexity input validation") {
  auto cfg = tiny_decoder(AV::mha, 1);
  Model<float> model(cfg);
  const std::vector<std::int32_t> one{3};
  CHECK_THROWS_AS(evaluate_perplexity(model, one, 4, 8), ContractError);
  ModelConfig enc = cfg;
  enc.arch = Arch::encoder_only;
  Model<float> emodel(enc);
  const auto text = random_tokens(32, 16, 2);
  CHECK_THROWS_AS(evaluate_perplexity(emodel, text, 4, 8), ContractError);
}

TEST_CASE("checkpoint round trip") {
  const std::string path = "build/ckpt_test.mhe";
  const std::string path2 = "build/ckpt_test2.mhe";
  auto cfg = tiny_decoder(AV::mhe_mul, 99);
  Model<float> model(cfg);
  const auto tokens = random_tokens(16, 16, 55);
  const auto before = model.logits(tokens, 1);

  save_checkpoint(model, path);
  Model<float> loaded = load_checkpoint(path);
  CHECK(loaded.config().variant == AV::mhe_mul);
  CHECK(loaded.config().n_layers == cfg.n_layers);

  const auto after = loaded.logits(tokens, 1);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(before.at(i) == after.at(i));

  save_checkpoint(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::ostringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  CHECK(s1.str().substr(0, 8) == "MHELAB01");
}

TEST_CASE("checkpoint error kinds are distinct") {
  const std::string path = "build/ckpt_err.mhe";
  auto cfg = tiny_decoder(AV::sha, 7);
  Model<float> model(cfg);
  save_checkpoint(model, path);

  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string blob = ss.str();

  auto write_blob = [&](const std::string& p, const std::string& data) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << data;
  };

  std::string bad_magic = blob;
  bad_magic[0] = 'X';
  write_blob("build/ckpt_badmagic.mhe", bad_magic);
  CHECK_THROWS_AS(load_checkpoint("build/ckpt_badmagic.mhe"), FormatError);

  std::string bad_version = blob;
  bad_version[7] = '9';
  write_blob("build/ckpt_badver.mhe", bad_version);
  CHECK_THROWS_AS(load_checkpoint("build/ckpt_badver.mhe"), VersionError);

  write_blob("build/ckpt_trunc.mhe", blob.substr(0, blob.size() - 13));
  CHECK_THROWS_AS(load_checkpoint("build/ckpt_trunc.mhe"), IoError);

  // Grow one tok_emb dimension in the manifest: shape no longer matches.
  std::string bad_shape = blob;
  const auto pos = bad_shape.find("tensor=tok_emb;16x16;");
  REQUIRE(pos != std::string::npos);
  bad_shape.replace(pos, 21, "tensor=tok_emb;17x16;");
  write_blob("build/ckpt_badshape.mhe", bad_shape);
  CHECK_THROWS_AS(load_checkpoint("build/ckpt_badshape.mhe"), DimError);

  CHECK_THROWS_AS(load_checkpoint("build/ckpt_missing.mhe"), IoError);
}

TEST_CASE("fp64 models save as fp32 checkpoints") {
  auto cfg = tiny_decoder(AV::el_att, 12);
  Model<double> model(cfg);
  const std::string path = "build/ckpt_f64.mhe";
  save_checkpoint(model, path);
  Model<float> loaded = load_checkpoint(path);
  const auto src = model.parameters();
  const auto dst = loaded.parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = 0; j < src[i].second.numel(); ++j)
      CHECK(dst[i].second.at(j) == static_cast<float>(src[i].second.at(j)));
}
