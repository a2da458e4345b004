#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "rvit/adversarial.hpp"
#include "rvit/classifier.hpp"
#include "rvit/detector.hpp"
#include "rvit/finite_diff.hpp"
#include "rvit/saliency.hpp"
#include "rvit/vit.hpp"

using namespace rvit;
using testutil::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

AttnParams random_attn(int d, bool biased, Rng& rng) {
  AttnParams p;
  p.wq = random_tensor({d, d}, rng, -0.3f, 0.3f);
  p.bq = random_tensor({d}, rng, -0.1f, 0.1f);
  p.wk = random_tensor({d, d}, rng, -0.3f, 0.3f);
  p.bk = random_tensor({d}, rng, -0.1f, 0.1f);
  p.wv = random_tensor({d, d}, rng, -0.3f, 0.3f);
  p.bv = random_tensor({d}, rng, -0.1f, 0.1f);
  p.wo = random_tensor({d, d}, rng, -0.3f, 0.3f);
  p.bo = random_tensor({d}, rng, -0.1f, 0.1f);
  if (biased) p.wb = random_tensor({d, d}, rng, -0.3f, 0.3f);
  return p;
}

// Double-precision attention oracle, single head, optional additive bias.
std::vector<double> attention_oracle(const Tensor& tokens, const Tensor* gb, const AttnParams& p) {
  const int m = tokens.dim(0), d = tokens.dim(1);
  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<double> out(static_cast<size_t>(m) * d, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = b.data()[j];
        for (int t = 0; t < d; ++t) acc += static_cast<double>(tokens.data()[i * d + t]) * w.data()[t * d + j];
        out[static_cast<size_t>(i) * d + j] = acc;
      }
    return out;
  };
  auto q = project(p.wq, p.bq), k = project(p.wk, p.bk), v = project(p.wv, p.bv);

  std::vector<double> bias(static_cast<size_t>(m) * m, 0.0);
  if (gb != nullptr) {
    std::vector<double> proj(static_cast<size_t>(m) * d, 0.0);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int t = 0; t < d; ++t) acc += static_cast<double>(gb->data()[i * d + t]) * p.wb.data()[t * d + j];
        proj[static_cast<size_t>(i) * d + j] = acc;
      }
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        double acc = 0.0;
        for (int t = 0; t < d; ++t)
          acc += proj[static_cast<size_t>(i) * d + t] * proj[static_cast<size_t>(j) * d + t];
        bias[static_cast<size_t>(i) * m + j] = acc;
      }
  }

  std::vector<double> ctx(static_cast<size_t>(m) * d, 0.0);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < m; ++i) {
    std::vector<double> logits(static_cast<size_t>(m));
    double mx = -1e300;
    for (int j = 0; j < m; ++j) {
      double acc = bias[static_cast<size_t>(i) * m + j];
      for (int t = 0; t < d; ++t) acc += q[static_cast<size_t>(i) * d + t] * k[static_cast<size_t>(j) * d + t];
      logits[static_cast<size_t>(j)] = acc * inv;
      mx = std::max(mx, logits[static_cast<size_t>(j)]);
    }
    double sum = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      sum += l;
    }
    for (int j = 0; j < m; ++j)
      for (int t = 0; t < d; ++t)
        ctx[static_cast<size_t>(i) * d + t] +=
            logits[static_cast<size_t>(j)] / sum * v[static_cast<size_t>(j) * d + t];
  }
  std::vector<double> out(static_cast<size_t>(m) * d, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = p.bo.data()[j];
      for (int t = 0; t < d; ++t) acc += ctx[static_cast<size_t>(i) * d + t] * p.wo.data()[t * d + j];
      out[static_cast<size_t>(i) * d + j] = acc;
    }
  return out;
}

// Linear classifier over flattened pixels; logits = x W + b.
class LinearModel final : public DiffModel {
 public:
  Tensor w;  // d x classes
  Tensor b;  // classes
  LinearModel(Tensor w_, Tensor b_) : w(std::move(w_)), b(std::move(b_)) {}
  int num_classes() const override { return w.dim(1); }
  Tensor forward(Tape& tape, const Tensor& image) const override {
    Tensor flat = tape.reshape(image, {1, w.dim(0)});
    Tensor logits = tape.add(tape.matmul(flat, w), b);
    return tape.reshape(logits, {w.dim(1)});
  }
};

class ConstantModel final : public DiffModel {
 public:
  int classes;
  explicit ConstantModel(int c) : classes(c) {}
  int num_classes() const override { return classes; }
  Tensor forward(Tape& tape, const Tensor& image) const override {
    // No dependence on the input beyond a zero-scaled term: gradients vanish.
    Tensor zero = tape.scale(tape.mean(image), 0.0f);
    Tensor row = tape.matmul(tape.reshape(zero, {1, 1}), Tensor::full({1, classes}, 1.0f));
    return tape.reshape(row, {classes});
  }
};

double ce_loss_linear(const LinearModel& m, const Tensor& x, int y) {
  Tape t;
  Tensor logits = m.forward(t, x);
  Tensor loss = t.cross_entropy_logits(t.reshape(logits, {1, m.num_classes()}), {y});
  return loss.scalar();
}

}  // namespace

// ---------------------------------------------------------------------------
// vit-core
// ---------------------------------------------------------------------------

TEST_CASE("patchify basics") {
  Tape tape;
  Rng rng(51);
  Tensor img = testutil::random_image(8, 8, 1, rng);

  Tensor whole = tape.patchify(img, 8);
  CHECK(whole.shape() == Shape{1, 64});
  CHECK(whole.vec() == img.vec());

  Tensor patches = tape.patchify(img, 4);
  CHECK(patches.shape() == Shape{4, 16});
  Tensor back = tape.unpatchify(patches, 8, 8, 1, 4);
  CHECK(back.vec() == img.vec());

  Tensor flat = Tensor::full({8, 8, 1}, 0.37f);
  Tensor cpat = tape.patchify(flat, 4);
  for (int r = 1; r < 4; ++r)
    for (int c = 0; c < 16; ++c) CHECK(cpat.data()[r * 16 + c] == cpat.data()[c]);

  CHECK_THROWS_AS(tape.patchify(img, 3), ShapeError);
}

TEST_CASE("embed matches its formula") {
  Tape tape;
  Rng rng(53);
  EmbedParams p;
  p.w_proj = random_tensor({16, 8}, rng);
  p.e_pos = random_tensor({4, 8}, rng);

  Tensor zeros({4, 16});
  CHECK(max_abs_diff(embed(tape, zeros, p), p.e_pos) == 0.0);

  EmbedParams zp;
  zp.w_proj = p.w_proj;
  zp.e_pos = Tensor({4, 8});
  CHECK(max_abs_diff(embed(tape, zeros, zp), Tensor({4, 8})) == 0.0);

  Tensor patches = random_tensor({4, 16}, rng);
  Tensor tokens = embed(tape, patches, p);
  auto ref = testutil::naive_matmul(patches, p.w_proj);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 8; ++j)
      CHECK(std::fabs(tokens.data()[i * 8 + j] -
                      (ref[static_cast<size_t>(i) * 8 + j] + p.e_pos.data()[i * 8 + j])) < 1e-6);
}

TEST_CASE("standard attention") {
  Rng rng(57);
  SUBCASE("single token attends to itself with weight one") {
    Tape tape;
    AttnParams p = random_attn(6, false, rng);
    Tensor tok = random_tensor({1, 6}, rng);
    std::vector<Tensor> attn;
    Tensor out = msa_standard(tape, tok, p, 1, &attn);
    REQUIRE(attn.size() == 1);
    CHECK(attn[0].data()[0] == doctest::Approx(1.0f));
    Tensor v = tape.add(tape.matmul(tok, p.wv), p.bv);
    Tensor expect = tape.add(tape.matmul(v, p.wo), p.bo);
    CHECK(max_abs_diff(out, expect) < 1e-6);
  }
  SUBCASE("identical tokens give uniform attention rows") {
    Tape tape;
    AttnParams p = random_attn(4, false, rng);
    Tensor one_row = random_tensor({1, 4}, rng);
    Tensor tok({5, 4});
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 4; ++j) tok.data()[i * 4 + j] = one_row.data()[j];
    std::vector<Tensor> attn;
    msa_standard(tape, tok, p, 2, &attn);
    for (const Tensor& a : attn)
      for (int64_t e = 0; e < a.numel(); ++e) CHECK(a.data()[e] == doctest::Approx(0.2f).epsilon(1e-5));
  }
  SUBCASE("three tokens, one head, matches the hand oracle") {
    Tape tape;
    AttnParams p = random_attn(5, false, rng);
    Tensor tok = random_tensor({3, 5}, rng);
    Tensor out = msa_standard(tape, tok, p, 1);
    auto ref = attention_oracle(tok, nullptr, p);
    for (int64_t e = 0; e < out.numel(); ++e)
      CHECK(std::fabs(out.data()[e] - ref[static_cast<size_t>(e)]) < 1e-5);
  }
  SUBCASE("attention rows sum to one") {
    Tape tape;
    AttnParams p = random_attn(8, true, rng);
    Tensor tok = random_tensor({6, 8}, rng, -2.0f, 2.0f);
    Tensor gb = random_tensor({6, 8}, rng, -2.0f, 2.0f);
    std::vector<Tensor> attn;
    msa_biased(tape, tok, gb, p, 2, &attn);
    msa_standard(tape, tok, p, 2, &attn);
    for (const Tensor& a : attn) {
      for (int r = 0; r < a.dim(0); ++r) {
        double sum = 0.0;
        for (int c = 0; c < a.dim(1); ++c) sum += a.data()[r * a.dim(1) + c];
        CHECK(std::fabs(sum - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("biased attention") {
  Rng rng(59);
  SUBCASE("zero bias projection reduces to standard attention exactly") {
    Tape tape;
    AttnParams p = random_attn(6, true, rng);
    for (auto& v : p.wb.vec()) v = 0.0f;
    Tensor tok = random_tensor({4, 6}, rng);
    Tensor gb = random_tensor({4, 6}, rng);
    Tensor biased = msa_biased(tape, tok, gb, p, 2);
    Tensor standard = msa_standard(tape, tok, p, 2);
    CHECK(biased.vec() == standard.vec());
  }
  SUBCASE("zero saliency stream reduces to standard attention exactly") {
    Tape tape;
    AttnParams p = random_attn(6, true, rng);
    Tensor tok = random_tensor({4, 6}, rng);
    Tensor gb({4, 6});
    Tensor biased = msa_biased(tape, tok, gb, p, 2);
    Tensor standard = msa_standard(tape, tok, p, 2);
    CHECK(biased.vec() == standard.vec());
  }
  SUBCASE("random streams match the brute-force oracle") {
    Tape tape;
    AttnParams p = random_attn(5, true, rng);
    Tensor tok = random_tensor({4, 5}, rng);
    Tensor gb = random_tensor({4, 5}, rng);
    Tensor out = msa_biased(tape, tok, gb, p, 1);
    auto ref = attention_oracle(tok, &gb, p);
    for (int64_t e = 0; e < out.numel(); ++e)
      CHECK(std::fabs(out.data()[e] - ref[static_cast<size_t>(e)]) < 1e-5);
  }
  SUBCASE("consistent permutation of tokens and saliency stream permutes outputs") {
    Tape tape;
    AttnParams p = random_attn(6, true, rng);
    Tensor tok = random_tensor({5, 6}, rng);
    Tensor gb = random_tensor({5, 6}, rng);
    std::vector<int> perm{3, 0, 4, 1, 2};
    Tensor out = msa_biased(tape, tok, gb, p, 2);
    Tensor pout = msa_biased(tape, tape.gather(tok, perm), tape.gather(gb, perm), p, 2);
    Tensor expect = tape.gather(out, perm);
    CHECK(max_abs_diff(pout, expect) < 1e-5);
  }
}

TEST_CASE("encoder stacks") {
  Rng rng(61);
  ModelShape shape{0, 6, 2, 12, 4};
  SUBCASE("zero layers is the identity") {
    Tape tape;
    EncoderParams enc = init_encoder(shape, false, rng);
    Tensor tok = random_tensor({4, 6}, rng);
    CHECK(encoder_forward(tape, tok, enc).vec() == tok.vec());
  }
  SUBCASE("zeroed residual-branch outputs keep the input") {
    Tape tape;
    ModelShape s1 = shape;
    s1.layers = 1;
    EncoderParams enc = init_encoder(s1, false, rng);
    for (auto& v : enc.blocks[0].attn.wo.vec()) v = 0.0f;
    for (auto& v : enc.blocks[0].attn.bo.vec()) v = 0.0f;
    for (auto& v : enc.blocks[0].fc2_w.vec()) v = 0.0f;
    for (auto& v : enc.blocks[0].fc2_b.vec()) v = 0.0f;
    Tensor tok = random_tensor({4, 6}, rng);
    CHECK(encoder_forward(tape, tok, enc).vec() == tok.vec());
  }
  SUBCASE("two layers equal the composition of single blocks") {
    Tape tape;
    ModelShape s2 = shape;
    s2.layers = 2;
    EncoderParams enc = init_encoder(s2, false, rng);
    EncoderParams first = enc, second = enc;
    first.blocks.resize(1);
    first.shape.layers = 1;
    second.blocks.erase(second.blocks.begin());
    second.shape.layers = 1;
    Tensor tok = random_tensor({4, 6}, rng);
    Tensor full = encoder_forward(tape, tok, enc);
    Tensor composed = encoder_forward(tape, encoder_forward(tape, tok, first), second);
    CHECK(full.vec() == composed.vec());
  }
  SUBCASE("biased stack demands the saliency stream") {
    Tape tape;
    ModelShape s1 = shape;
    s1.layers = 1;
    EncoderParams enc = init_encoder(s1, true, rng);
    Tensor tok = random_tensor({4, 6}, rng);
    CHECK_THROWS_AS(encoder_forward(tape, tok, enc), ShapeError);
  }
  SUBCASE("output shape always matches input shape") {
    Tape tape;
    for (int layers : {1, 3}) {
      ModelShape s = shape;
      s.layers = layers;
      EncoderParams enc = init_encoder(s, true, rng);
      Tensor tok = random_tensor({4, 6}, rng);
      Tensor gb = random_tensor({4, 6}, rng);
      CHECK(encoder_forward(tape, tok, enc, &gb).shape() == tok.shape());
    }
  }
}

TEST_CASE("global average pooling") {
  Tape tape;
  Rng rng(67);
  Tensor row = random_tensor({1, 5}, rng);
  Tensor rep({3, 5});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) rep.data()[i * 5 + j] = row.data()[j];
  Tensor pooled = gap(tape, rep);
  for (int j = 0; j < 5; ++j) CHECK(pooled.data()[j] == doctest::Approx(row.data()[j]));

  Tensor pm({2, 5});
  for (int j = 0; j < 5; ++j) {
    pm.data()[j] = row.data()[j];
    pm.data()[5 + j] = -row.data()[j];
  }
  Tensor zero = gap(tape, pm);
  for (int j = 0; j < 5; ++j) CHECK(std::fabs(zero.data()[j]) < 1e-7);

  Tensor rnd = random_tensor({5, 4}, rng);
  Tensor mean = gap(tape, rnd);
  for (int j = 0; j < 4; ++j) {
    double acc = 0.0;
    for (int i = 0; i < 5; ++i) acc += rnd.data()[i * 4 + j];
    CHECK(std::fabs(mean.data()[j] - acc / 5.0) < 1e-7);
  }
}

// ---------------------------------------------------------------------------
// adversarial
// ---------------------------------------------------------------------------

TEST_CASE("least likely class") {
  CHECK(least_likely_class(Tensor::row({3.0f, 1.0f, 2.0f})) == 1);
  CHECK(least_likely_class(Tensor::row({1.0f, 1.0f})) == 0);
  Rng rng(71);
  for (int t = 0; t < 50; ++t) {
    Tensor logits = random_tensor({10}, rng, -4.0f, 4.0f);
    int best = 0;
    for (int i = 1; i < 10; ++i)
      if (logits.data()[i] < logits.data()[best]) best = i;
    CHECK(least_likely_class(logits) == best);
  }
  CHECK_THROWS_AS(least_likely_class(Tensor::row({1.0f})), ShapeError);
}

TEST_CASE("l-inf projection") {
  const float eps = 0.03f;
  Tensor d = Tensor::row({2 * eps, -3 * eps, 0.5f * eps});
  Tensor p = project_linf(d, eps);
  CHECK(p.data()[0] == eps);
  CHECK(p.data()[1] == -eps);
  CHECK(p.data()[2] == 0.5f * eps);
  CHECK(project_linf(p, eps).vec() == p.vec());
}

TEST_CASE("fgsm with random start") {
  Rng model_rng(73);
  const int d = 12;
  LinearModel model(random_tensor({d, 3}, model_rng), random_tensor({3}, model_rng));
  Tensor x = random_tensor({2, 2, 3}, model_rng, 0.2f, 0.8f);
  AdvConfig cfg;
  cfg.epsilon = 8.0f / 255.0f;

  SUBCASE("zero gradient leaves the clipped uniform draw") {
    ConstantModel cm(3);
    Rng rng(74);
    AdvExample ex = fgsm_rs(cm, x, 1, cfg, rng);
    for (int64_t i = 0; i < ex.delta.numel(); ++i) CHECK(std::fabs(ex.delta.data()[i]) <= cfg.epsilon);
  }
  SUBCASE("strictly positive gradient with no random start saturates at +epsilon") {
    Tensor w({d, 2});
    for (int i = 0; i < d; ++i) w.data()[i * 2 + 1] = -1.0f;
    LinearModel pos(w, Tensor({2}));
    AdvConfig nors = cfg;
    nors.random_start = false;
    Rng rng(75);
    Tensor x_in = random_tensor({2, 2, 3}, rng, 0.3f, 0.7f);
    AdvExample ex = fgsm_rs(pos, x_in, 1, nors, rng);
    for (int64_t i = 0; i < ex.delta.numel(); ++i)
      CHECK(ex.delta.data()[i] == doctest::Approx(cfg.epsilon).epsilon(1e-6));
  }
  SUBCASE("bounds hold over repeated trials") {
    Rng rng(76);
    for (int t = 0; t < 100; ++t) {
      Tensor xi = random_tensor({2, 2, 3}, rng, 0.0f, 1.0f);
      AdvExample ex = fgsm_rs(model, xi, rng.uniform_int(0, 2), cfg, rng);
      for (int64_t i = 0; i < ex.delta.numel(); ++i) {
        CHECK(std::fabs(ex.delta.data()[i]) <= cfg.epsilon + 1e-7f);
        CHECK(ex.x_adv.data()[i] >= 0.0f);
        CHECK(ex.x_adv.data()[i] <= 1.0f);
      }
    }
  }
  SUBCASE("epsilon zero returns the input unchanged") {
    AdvConfig zero = cfg;
    zero.epsilon = 0.0f;
    Rng rng(77);
    AdvExample ex = fgsm_rs(model, x, 0, zero, rng);
    CHECK(ex.x_adv.vec() == x.vec());
    for (int64_t i = 0; i < ex.delta.numel(); ++i) CHECK(ex.delta.data()[i] == 0.0f);
  }
  SUBCASE("untargeted fgsm never decreases the loss of a linear model") {
    Rng rng(78);
    for (int t = 0; t < 30; ++t) {
      Tensor xi = random_tensor({2, 2, 3}, rng, 0.1f, 0.9f);
      const int y = rng.uniform_int(0, 2);
      const double before = ce_loss_linear(model, xi, y);
      AdvExample ex = fgsm_rs(model, xi, y, cfg, rng);
      const double after = ce_loss_linear(model, ex.x_adv, y);
      CHECK(after >= before - 1e-6);
    }
  }
  SUBCASE("fixed seed reproduces the example bitwise") {
    Rng r1(79), r2(79);
    AdvExample a = fgsm_rs(model, x, 1, cfg, r1);
    AdvExample b = fgsm_rs(model, x, 1, cfg, r2);
    CHECK(a.x_adv.vec() == b.x_adv.vec());
  }
}

TEST_CASE("least-likely targeted fgsm") {
  Rng rng(83);
  AdvConfig cfg;
  cfg.epsilon = 8.0f / 255.0f;
  cfg.targeted = true;

  SUBCASE("targets the argmin logit") {
    Tensor w({4, 2});
    Tensor b = Tensor::row({5.0f, -5.0f});
    LinearModel m(w, b);
    Tensor x = random_tensor({2, 2, 1}, rng, 0.2f, 0.8f);
    AdvExample ex = fgsm_ll(m, x, cfg, rng);
    REQUIRE(ex.target_label.has_value());
    CHECK(*ex.target_label == 1);
  }
  SUBCASE("zero gradients reduce to clipped uniform noise") {
    ConstantModel cm(3);
    Tensor x = random_tensor({2, 2, 1}, rng, 0.3f, 0.7f);
    AdvExample ex = fgsm_ll(cm, x, cfg, rng);
    for (int64_t i = 0; i < ex.delta.numel(); ++i) CHECK(std::fabs(ex.delta.data()[i]) <= cfg.epsilon);
  }
  SUBCASE("bound holds across many samples") {
    LinearModel m(random_tensor({4, 3}, rng), random_tensor({3}, rng));
    for (int t = 0; t < 200; ++t) {
      Tensor x = random_tensor({2, 2, 1}, rng, 0.0f, 1.0f);
      AdvExample ex = fgsm_ll(m, x, cfg, rng);
      for (int64_t i = 0; i < ex.delta.numel(); ++i) {
        CHECK(std::fabs(ex.delta.data()[i]) <= cfg.epsilon + 1e-7f);
        CHECK(ex.x_adv.data()[i] >= 0.0f);
        CHECK(ex.x_adv.data()[i] <= 1.0f);
      }
    }
  }
}

TEST_CASE("pgd") {
  Rng rng(89);
  AdvConfig cfg;
  cfg.epsilon = 8.0f / 255.0f;

  SUBCASE("one full-size step with zero init equals plain fgsm") {
    LinearModel m(random_tensor({12, 3}, rng), random_tensor({3}, rng));
    Tensor x = random_tensor({2, 2, 3}, rng, 0.3f, 0.7f);
    AdvConfig pcfg = cfg;
    pcfg.steps = 1;
    pcfg.step_size = cfg.epsilon;
    pcfg.random_start = false;
    Rng r1(90);
    AdvExample viapgd = pgd(m, x, 1, pcfg, r1);
    AdvConfig fcfg = cfg;
    fcfg.random_start = false;
    Rng r2(90);
    AdvExample viafgsm = fgsm_rs(m, x, 1, fcfg, r2);
    CHECK(viapgd.x_adv.vec() == viafgsm.x_adv.vec());
  }
  SUBCASE("ten steps on a two-class linear model saturate fixed-sign coordinates") {
    // For two classes the input gradient is (p0 - y0) (w0 - w1): the sign per
    // coordinate stays fixed during the whole ascent.
    Tensor w({12, 2});
    Rng wr(91);
    for (int i = 0; i < 12; ++i) {
      w.data()[i * 2] = wr.uniform(0.2f, 1.0f) * (wr.coin() ? 1.0f : -1.0f);
      w.data()[i * 2 + 1] = -w.data()[i * 2];
    }
    LinearModel m(w, Tensor({2}));
    Tensor x = random_tensor({2, 2, 3}, wr, 0.4f, 0.6f);
    AdvConfig pcfg = cfg;
    pcfg.steps = 10;
    pcfg.step_size = cfg.epsilon / 4.0f;
    pcfg.random_start = false;
    AdvExample ex = pgd(m, x, 0, pcfg, wr);
    for (int64_t i = 0; i < ex.delta.numel(); ++i) {
      CHECK(std::fabs(std::fabs(ex.delta.data()[i]) - cfg.epsilon) < 1e-6f);
    }
  }
  SUBCASE("final perturbation always respects the ball") {
    LinearModel m(random_tensor({12, 3}, rng), random_tensor({3}, rng));
    for (int t = 0; t < 20; ++t) {
      Tensor x = random_tensor({2, 2, 3}, rng, 0.0f, 1.0f);
      AdvConfig pcfg = cfg;
      pcfg.steps = 5;
      pcfg.step_size = cfg.epsilon / 2.0f;
      AdvExample ex = pgd(m, x, rng.uniform_int(0, 2), pcfg, rng);
      for (int64_t i = 0; i < ex.delta.numel(); ++i)
        CHECK(std::fabs(ex.delta.data()[i]) <= cfg.epsilon + 1e-7f);
    }
  }
}

// ---------------------------------------------------------------------------
// saliency
// ---------------------------------------------------------------------------

TEST_CASE("guided backprop saliency") {
  Rng rng(97);
  SUBCASE("constant model degenerates to the 0.5 image") {
    ConstantModel cm(2);
    Tensor x = testutil::random_image(4, 4, 1, rng);
    SaliencyResult res = guided_backprop(cm, x);
    CHECK(res.degenerate);
    for (float v : res.x_prime.vec()) CHECK(v == 0.5f);
  }
  SUBCASE("positive linear model recovers normalized weights") {
    const int d = 16;
    Tensor w({d, 2});
    Rng wr(98);
    for (int i = 0; i < d; ++i) {
      w.data()[i * 2] = wr.uniform(0.1f, 1.0f);
      w.data()[i * 2 + 1] = 0.0f;
    }
    LinearModel m(w, Tensor::row({1.0f, 0.0f}));  // top-1 logit is class 0
    Tensor x = testutil::random_image(4, 4, 1, wr);
    SaliencyResult res = guided_backprop(m, x);
    CHECK_FALSE(res.degenerate);
    CHECK(res.target_class == 0);
    float lo = w.data()[0], hi = w.data()[0];
    for (int i = 0; i < d; ++i) {
      lo = std::min(lo, w.data()[i * 2]);
      hi = std::max(hi, w.data()[i * 2]);
    }
    for (int i = 0; i < d; ++i) {
      const float expect = (w.data()[i * 2] - lo) / (hi - lo);
      CHECK(res.x_prime.data()[i] == doctest::Approx(expect).epsilon(1e-5));
    }
  }
  SUBCASE("saliency is image-shaped, in range, and deterministic") {
    ModelShape shape{2, 8, 2, 16, 2};
    ViTClassifier vit = ViTClassifier::make(4, 4, 1, 3, shape, 8, rng);
    Tensor x = testutil::random_image(4, 4, 1, rng);
    SaliencyResult a = guided_backprop(vit, x);
    SaliencyResult b = guided_backprop(vit, x);
    CHECK(a.x_prime.shape() == x.shape());
    for (float v : a.x_prime.vec()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    CHECK(a.x_prime.vec() == b.x_prime.vec());
  }
}

// ---------------------------------------------------------------------------
// detector
// ---------------------------------------------------------------------------

namespace {

DetectorModel tiny_detector(Rng& rng) {
  ModelShape shape{2, 8, 2, 16, 2};
  return DetectorModel::make(4, 4, 1, shape, 8, rng);
}

}  // namespace

TEST_CASE("detector forward") {
  Rng rng(101);
  DetectorModel det = tiny_detector(rng);
  ModelShape pshape{1, 8, 2, 16, 2};
  ViTClassifier probe = ViTClassifier::make(4, 4, 1, 2, pshape, 8, rng);
  Tensor x = testutil::random_image(4, 4, 1, rng);

  SUBCASE("probability is in range and complements to one") {
    Tape tape;
    DetectorOutput out = detector_forward(tape, det, x, probe);
    CHECK(out.p >= 0.0f);
    CHECK(out.p <= 1.0f);
    const double l0 = out.logits.data()[0], l1 = out.logits.data()[1];
    const double p1 = std::exp(l1) / (std::exp(l0) + std::exp(l1));
    CHECK(std::fabs(out.p - p1) < 1e-6);
  }
  SUBCASE("identical inputs produce identical outputs") {
    Tape t1, t2;
    DetectorOutput a = detector_forward(t1, det, x, probe);
    DetectorOutput b = detector_forward(t2, det, x, probe);
    CHECK(a.logits.vec() == b.logits.vec());
    CHECK(a.z.vec() == b.z.vec());
  }
  SUBCASE("zero-weight head gives p exactly one half") {
    DetectorModel zero = det;
    zero.head.w1 = Tensor(det.head.w1.shape());
    zero.head.b1 = Tensor(det.head.b1.shape());
    zero.head.w2 = Tensor(det.head.w2.shape());
    zero.head.b2 = Tensor(det.head.b2.shape());
    Tape tape;
    DetectorOutput out = detector_forward(tape, zero, x, probe);
    CHECK(out.p == 0.5f);
  }
}

TEST_CASE("snn loss") {
  SUBCASE("four-point configuration matches the hand enumeration") {
    Tensor z({4, 2}, {1.0f, 0.0f, 1.0f, 0.0f, 0.0f, 1.0f, 0.0f, 1.0f});
    std::vector<int> y{+1, +1, -1, -1};
    Tape tape;
    Tensor loss = snn_loss(tape, z, y, 1.0f);
    CHECK(loss.scalar() == doctest::Approx(testutil::snn_brute_force(z, y, 1.0)).epsilon(1e-6));
  }
  SUBCASE("identical points have the closed-form value") {
    for (int b : {2, 4}) {
      Tensor z({2 * b, 3});
      for (int i = 0; i < 2 * b; ++i)
        for (int j = 0; j < 3; ++j) z.data()[i * 3 + j] = 0.7f;
      std::vector<int> y;
      for (int i = 0; i < b; ++i) y.push_back(+1);
      for (int i = 0; i < b; ++i) y.push_back(-1);
      Tape tape;
      Tensor loss = snn_loss(tape, z, y, 0.5f);
      const double expect = -std::log(static_cast<double>(b - 1) / (2.0 * b - 1.0));
      CHECK(loss.scalar() == doctest::Approx(expect).epsilon(1e-5));
    }
  }
  SUBCASE("permutation of the batch keeps the loss") {
    Rng rng(103);
    Tensor z = random_tensor({6, 4}, rng);
    std::vector<int> y{+1, -1, +1, -1, +1, -1};
    Tape tape;
    const float base = snn_loss(tape, z, y, 0.5f).scalar();
    std::vector<int> perm{4, 2, 0, 5, 1, 3};
    Tensor zp({6, 4});
    std::vector<int> yp(6);
    for (int i = 0; i < 6; ++i) {
      yp[static_cast<size_t>(i)] = y[static_cast<size_t>(perm[static_cast<size_t>(i)])];
      for (int j = 0; j < 4; ++j) zp.data()[i * 4 + j] = z.data()[perm[static_cast<size_t>(i)] * 4 + j];
    }
    CHECK(snn_loss(tape, zp, yp, 0.5f).scalar() == doctest::Approx(base).epsilon(1e-6));
  }
  SUBCASE("brute force agreement for B in {2,4,8}") {
    Rng rng(107);
    for (int b : {2, 4, 8}) {
      Tensor z = random_tensor({2 * b, 5}, rng);
      std::vector<int> y;
      for (int i = 0; i < b; ++i) y.push_back(+1);
      for (int i = 0; i < b; ++i) y.push_back(-1);
      Tape tape;
      const double got = snn_loss(tape, z, y, 0.5f).scalar();
      const double want = testutil::snn_brute_force(z, y, 0.5);
      CHECK(std::fabs(got - want) < 1e-6);
    }
  }
  SUBCASE("singleton class anchors are skipped and flagged") {
    Rng rng(109);
    Tensor z = random_tensor({3, 4}, rng);
    std::vector<int> y{+1, +1, -1};
    Tape tape;
    SnnInfo info;
    snn_loss(tape, z, y, 0.5f, &info);
    CHECK(info.skipped_anchors == 1);
    CHECK(info.used_anchors == 2);
  }
  SUBCASE("moving a between-class pair apart lowers the loss") {
    Tensor z({4, 2}, {1.0f, 0.0f, 0.9f, 0.1f, 0.8f, 0.6f, 0.1f, 1.0f});
    std::vector<int> y{+1, +1, -1, -1};
    Tape tape;
    const float before = snn_loss(tape, z, y, 0.5f).scalar();
    Tensor z2 = z.clone();
    z2.data()[4] = 0.1f;
    z2.data()[5] = 1.0f;
    const float after = snn_loss(tape, z2, y, 0.5f).scalar();
    CHECK(after < before);
  }
  SUBCASE("gradient agrees with finite differences") {
    Rng rng(113);
    Tensor z = random_tensor({4, 3}, rng);
    std::vector<int> y{+1, +1, -1, -1};
    auto f = [&](Tape& t, const std::vector<Tensor>& in) { return snn_loss(t, in[0], y, 0.5f); };
    FiniteDiffReport rep = finite_diff_check(f, {z}, 1e-4, 1e-3);
    INFO("max_rel_err=", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("detector loss composition") {
  Rng rng(127);
  Tensor logits = random_tensor({4, 2}, rng);
  Tensor z = random_tensor({4, 3}, rng);
  std::vector<int> y{+1, +1, -1, -1};
  Tape tape;

  DetectorLossParts parts;
  const double full = detector_loss(tape, logits, y, z, 0.15f, 0.5f, &parts).scalar();
  CHECK(std::fabs(full - (0.85 * parts.ce + 0.15 * parts.snn)) < 1e-6);

  const double ce_only = detector_loss(tape, logits, y, z, 0.0f, 0.5f).scalar();
  std::vector<int> classes{1, 1, 0, 0};
  CHECK(ce_only == doctest::Approx(tape.cross_entropy_logits(logits, classes).scalar()).epsilon(1e-6));

  const double snn_only = detector_loss(tape, logits, y, z, 1.0f, 0.5f).scalar();
  CHECK(snn_only == doctest::Approx(snn_loss(tape, z, y, 0.5f).scalar()).epsilon(1e-6));
}

// ---------------------------------------------------------------------------
// classifier
// ---------------------------------------------------------------------------

namespace {

ClassifierModel tiny_classifier(Rng& rng) {
  ModelShape enc{1, 8, 2, 16, 2};
  ModelShape dec{1, 6, 2, 12, 2};
  return ClassifierModel::make(4, 4, 1, 2, enc, dec, 8, rng);
}

}  // namespace

TEST_CASE("mask sampling") {
  Rng rng(131);
  MaskSpec all = sample_mask(16, 0.0f, rng);
  CHECK(all.visible_count() == 16);

  MaskSpec quarter = sample_mask(16, 0.75f, rng);
  CHECK(quarter.visible_count() == 4);

  for (int m : {5, 8, 16, 33}) {
    for (float r : {0.1f, 0.45f, 0.75f, 0.9f}) {
      MaskSpec spec = sample_mask(m, r, rng);
      CHECK(spec.visible_count() == static_cast<int>(std::lround(m * (1.0 - static_cast<double>(r)))));
    }
  }

  std::vector<int> counts(8, 0);
  for (int t = 0; t < 10000; ++t) {
    MaskSpec spec = sample_mask(8, 0.5f, rng);
    for (int i = 0; i < 8; ++i) counts[static_cast<size_t>(i)] += spec.visible[static_cast<size_t>(i)];
  }
  for (int c : counts) {
    CHECK(c > 4800);
    CHECK(c < 5200);
  }
  CHECK_THROWS_AS(sample_mask(8, 1.0f, rng), ValueError);
}

TEST_CASE("masked encode") {
  Rng rng(137);
  ClassifierModel cls = tiny_classifier(rng);
  Tensor x = testutil::random_image(4, 4, 1, rng);

  SUBCASE("all-visible equals the plain encoder") {
    Tape tape;
    MaskSpec all = all_visible_mask(4);
    Tensor via_mask = masked_encode(tape, x, all, cls.clean_enc, cls.mask_token);
    Tensor patches = tape.patchify(x, 2);
    Tensor tokens = embed(tape, patches, cls.clean_enc.embed_p);
    Tensor plain = encoder_forward(tape, tokens, cls.clean_enc.enc);
    CHECK(via_mask.vec() == plain.vec());
  }
  SUBCASE("masked rows carry the mask token exactly") {
    Tape tape;
    Rng mr(138);
    MaskSpec mask = sample_mask(4, 0.5f, mr);
    Tensor out = masked_encode(tape, x, mask, cls.clean_enc, cls.mask_token);
    CHECK(out.dim(0) == 4);
    for (int row : mask.masked_rows()) {
      for (int j = 0; j < 8; ++j) CHECK(out.data()[row * 8 + j] == cls.mask_token.data()[j]);
    }
  }
  SUBCASE("wrong mask length is rejected") {
    Tape tape;
    MaskSpec bad = all_visible_mask(5);
    CHECK_THROWS_AS(masked_encode(tape, x, bad, cls.clean_enc, cls.mask_token), ShapeError);
  }
}

TEST_CASE("reconstruction loss") {
  Rng rng(139);
  Tensor x = testutil::random_image(4, 4, 1, rng);
  Rng mr(140);
  MaskSpec mask = sample_mask(4, 0.5f, mr);
  Tape tape;

  CHECK(reconstruction_loss(tape, x, x, mask, 2).scalar() == 0.0f);

  SUBCASE("single masked patch off by a constant") {
    Tensor recon = x.clone();
    const int patch_row = mask.masked_rows()[0];
    const int by = patch_row / 2, bx = patch_row % 2;
    for (int py = 0; py < 2; ++py)
      for (int px = 0; px < 2; ++px) recon.data()[((by * 2 + py) * 4 + (bx * 2 + px))] += 0.25f;
    const int masked_count = static_cast<int>(mask.masked_rows().size());
    const double expect = 0.25 * 0.25 * 4.0 / (masked_count * 4.0);
    CHECK(reconstruction_loss(tape, x, recon, mask, 2).scalar() == doctest::Approx(expect).epsilon(1e-6));
  }
  SUBCASE("random pair matches the per-pixel oracle") {
    Tensor recon = testutil::random_image(4, 4, 1, rng);
    double acc = 0.0;
    int count = 0;
    for (int row : mask.masked_rows()) {
      const int by = row / 2, bx = row % 2;
      for (int py = 0; py < 2; ++py)
        for (int px = 0; px < 2; ++px) {
          const int off = (by * 2 + py) * 4 + (bx * 2 + px);
          const double d = static_cast<double>(recon.data()[off]) - x.data()[off];
          acc += d * d;
          ++count;
        }
    }
    CHECK(reconstruction_loss(tape, x, recon, mask, 2).scalar() ==
          doctest::Approx(acc / count).epsilon(1e-6));
    double full = 0.0;
    for (int i = 0; i < 16; ++i) {
      const double d = static_cast<double>(recon.data()[i]) - x.data()[i];
      full += d * d;
    }
    CHECK(reconstruction_loss(tape, x, recon, mask, 2, RecTarget::all).scalar() ==
          doctest::Approx(full / 16.0).epsilon(1e-6));
  }
}

TEST_CASE("contrastive loss") {
  SUBCASE("orthogonal pairs at tau=1 have the closed form") {
    Tensor z({4, 2}, {1.0f, 0.0f, 0.0f, 1.0f, 1.0f, 0.0f, 0.0f, 1.0f});
    Tape tape;
    const double got = contrastive_loss(tape, z, 1.0f).scalar();
    const double e = std::exp(1.0);
    const double expect = -std::log(e / (e + 2.0));
    CHECK(got == doctest::Approx(expect).epsilon(1e-5));
  }
  SUBCASE("swapping the clean and adversarial halves keeps the loss") {
    Rng rng(149);
    Tensor z = random_tensor({8, 5}, rng);
    Tensor swapped({8, 5});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) {
        swapped.data()[i * 5 + j] = z.data()[(i + 4) * 5 + j];
        swapped.data()[(i + 4) * 5 + j] = z.data()[i * 5 + j];
      }
    Tape tape;
    CHECK(contrastive_loss(tape, z, 0.5f).scalar() ==
          doctest::Approx(contrastive_loss(tape, swapped, 0.5f).scalar()).epsilon(1e-6));
  }
  SUBCASE("identical representations give log(2B-1)") {
    for (int b : {2, 4}) {
      Tensor z({2 * b, 3});
      for (int64_t i = 0; i < z.numel(); ++i) z.data()[i] = 0.4f;
      Tape tape;
      CHECK(contrastive_loss(tape, z, 0.5f).scalar() ==
            doctest::Approx(std::log(2.0 * b - 1.0)).epsilon(1e-5));
    }
  }
  SUBCASE("brute force agreement for B in {2,4,8}") {
    Rng rng(151);
    for (int b : {2, 4, 8}) {
      Tensor z = random_tensor({2 * b, 4}, rng);
      Tape tape;
      CHECK(std::fabs(contrastive_loss(tape, z, 0.5f).scalar() -
                      testutil::contrastive_brute_force(z, 0.5)) < 1e-6);
    }
  }
  SUBCASE("a single pair is rejected") {
    Tensor z({2, 3});
    Tape tape;
    CHECK_THROWS_AS(contrastive_loss(tape, z, 0.5f), ValueError);
  }
}

TEST_CASE("adaptive ensemble") {
  Rng rng(157);
  const int m = 6, d = 4;

  SUBCASE("reduction identities are exact") {
    Tensor zc = random_tensor({m, d}, rng, -0.75f, 0.75f);
    Tensor za = random_tensor({m, d}, rng, -0.75f, 0.75f);
    MaskSpec mc = all_visible_mask(m), ma = all_visible_mask(m);
    Tape tape;
    EnsembleRep at1 = adaptive_ensemble(tape, zc, za, mc, ma, 1.0f);
    CHECK(at1.z_hat.vec() == zc.vec());
    EnsembleRep at0 = adaptive_ensemble(tape, zc, za, mc, ma, 0.0f);
    CHECK(at0.z_hat.vec() == za.vec());

    MaskSpec none = mc;
    for (auto& v : none.visible) v = 0;
    EnsembleRep single = adaptive_ensemble(tape, zc, za, mc, none, 0.5f);
    CHECK(single.z_hat.vec() == zc.vec());

    EnsembleRep dark = adaptive_ensemble(tape, zc, za, none, none, 0.5f);
    for (int64_t e = 0; e < dark.z_hat.numel(); ++e) CHECK(dark.z_hat.data()[e] == 0.0f);
  }
  SUBCASE("random instances match the elementwise oracle within 1e-7") {
    for (int t = 0; t < 200; ++t) {
      Tensor zc = random_tensor({m, d}, rng, -0.75f, 0.75f);
      Tensor za = random_tensor({m, d}, rng, -0.75f, 0.75f);
      Rng mr(158 + t);
      MaskSpec mc = sample_mask(m, 0.5f, mr), ma = sample_mask(m, 0.5f, mr);
      const float p = mr.uniform(0.0f, 1.0f);
      Tape tape;
      EnsembleRep rep = adaptive_ensemble(tape, zc, za, mc, ma, p);
      for (int i = 0; i < m; ++i) {
        const double a = static_cast<double>(p) * (mc.visible[static_cast<size_t>(i)] ? 1.0 : 0.0);
        const double b = (1.0 - static_cast<double>(p)) * (ma.visible[static_cast<size_t>(i)] ? 1.0 : 0.0);
        const double den = std::max(a + b, 1e-12);
        for (int j = 0; j < d; ++j) {
          const double expect = (a * zc.data()[i * d + j] + b * za.data()[i * d + j]) / den;
          CHECK(std::fabs(rep.z_hat.data()[i * d + j] - expect) < 1e-7);
        }
      }
    }
  }
  SUBCASE("both streams visible fuse convexly") {
    Tensor zc = random_tensor({m, d}, rng);
    Tensor za = random_tensor({m, d}, rng);
    MaskSpec all = all_visible_mask(m);
    const float p = 0.3f;
    Tape tape;
    EnsembleRep rep = adaptive_ensemble(tape, zc, za, all, all, p);
    for (int64_t e = 0; e < rep.z_hat.numel(); ++e) {
      const double expect = static_cast<double>(p) * zc.data()[e] + (1.0 - static_cast<double>(p)) * za.data()[e];
      CHECK(std::fabs(rep.z_hat.data()[e] - expect) < 1e-6);
    }
  }
}

TEST_CASE("pretrain loss decomposition and gradients") {
  Rng rng(163);
  ClassifierModel cls = tiny_classifier(rng);
  std::vector<PretrainItem> batch;
  Rng mr(164);
  for (int i = 0; i < 2; ++i) {
    PretrainItem item;
    item.x_cln = testutil::random_image(4, 4, 1, rng);
    item.x_adv = testutil::random_image(4, 4, 1, rng);
    item.mask = sample_mask(4, 0.5f, mr);
    batch.push_back(std::move(item));
  }

  SUBCASE("weighted decomposition holds at omega=0.35") {
    Tape tape;
    PretrainParts parts;
    const double loss = pretrain_loss(tape, cls, batch, 0.35f, 0.5f, RecTarget::masked, &parts).scalar();
    const double expect = 0.65 * 0.5 * (parts.rec_cln + parts.rec_adv) + 0.35 * parts.cl;
    CHECK(std::fabs(loss - expect) < 1e-6);
  }
  SUBCASE("omega limits select one term") {
    Tape tape;
    PretrainParts parts;
    const double rec_only = pretrain_loss(tape, cls, batch, 0.0f, 0.5f, RecTarget::masked, &parts).scalar();
    CHECK(rec_only == doctest::Approx(0.5 * (parts.rec_cln + parts.rec_adv)).epsilon(1e-6));
    const double cl_only = pretrain_loss(tape, cls, batch, 1.0f, 0.5f, RecTarget::masked, &parts).scalar();
    CHECK(cl_only == doctest::Approx(parts.cl).epsilon(1e-6));
  }
  SUBCASE("decoder weight gradient passes finite differences") {
    auto f = [&](Tape& t, const std::vector<Tensor>& in) {
      ClassifierModel m = cls;
      m.decoder.out_w = in[0];
      m.mask_token = in[1];
      return pretrain_loss(t, m, batch, 0.35f, 0.5f, RecTarget::masked);
    };
    FiniteDiffReport rep = finite_diff_check(f, {cls.decoder.out_w, cls.mask_token}, 1e-4, 1e-3);
    INFO("max_rel_err=", rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("finetune forward") {
  Rng rng(167);
  ClassifierModel cls = tiny_classifier(rng);
  Tensor x = testutil::random_image(4, 4, 1, rng);

  SUBCASE("p=1 with all-visible masks equals the clean path") {
    Tape tape;
    MaskSpec all = all_visible_mask(4);
    Tensor logits = finetune_forward(tape, cls, x, 1.0f, all, all);
    CleanPathModel clean(cls);
    Tape t2;
    Tensor expect = clean.forward(t2, x);
    CHECK(logits.vec() == expect.vec());
  }
  SUBCASE("zero-weight head gives uniform logits") {
    ClassifierModel zero = cls;
    zero.head.w1 = Tensor(cls.head.w1.shape());
    zero.head.b1 = Tensor(cls.head.b1.shape());
    zero.head.w2 = Tensor(cls.head.w2.shape());
    zero.head.b2 = Tensor(cls.head.b2.shape());
    Tape tape;
    Rng mr(168);
    MaskSpec m1 = sample_mask(4, 0.5f, mr), m2 = sample_mask(4, 0.5f, mr);
    Tensor logits = finetune_forward(tape, zero, x, 0.7f, m1, m2);
    CHECK(logits.data()[0] == 0.0f);
    CHECK(logits.data()[1] == 0.0f);
  }
  SUBCASE("same masks and p reproduce identical logits") {
    Rng mr(169);
    MaskSpec m1 = sample_mask(4, 0.5f, mr), m2 = sample_mask(4, 0.5f, mr);
    Tape t1, t2;
    Tensor a = finetune_forward(t1, cls, x, 0.6f, m1, m2);
    Tensor b = finetune_forward(t2, cls, x, 0.6f, m1, m2);
    CHECK(a.vec() == b.vec());
  }
}
