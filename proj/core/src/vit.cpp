#include "rvit/vit.hpp"

#include <cmath>

namespace rvit {

void ModelShape::validate(int image_h, int image_w, const std::string& what) const {
  if (layers < 0) throw ConfigError(cat(what, ": negative layer count"));
  if (hidden <= 0 || heads <= 0 || mlp <= 0 || patch <= 0) {
    throw ConfigError(cat(what, ": hidden/heads/mlp/patch must be positive"));
  }
  if (hidden % heads != 0) throw ConfigError(cat(what, ": hidden ", hidden, " not divisible by heads ", heads));
  if (image_h % patch != 0 || image_w % patch != 0) {
    throw ConfigError(cat(what, ": image ", image_h, "x", image_w, " not divisible by patch ", patch));
  }
}

void NamedParams::add(const std::string& name, const Tensor& t) {
  for (const auto& [n, v] : items) {
    if (n == name) throw ValueError(cat("params: duplicate name '", name, "'"));
  }
  items.emplace_back(name, t);
}

std::vector<Tensor> NamedParams::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items.size());
  for (const auto& [n, t] : items) out.push_back(t);
  return out;
}

int64_t NamedParams::total_elems() const {
  int64_t n = 0;
  for (const auto& [name, t] : items) n += t.numel();
  return n;
}

namespace {

Tensor init_weight(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.trunc_normal(0.02f);
  return t;
}

}  // namespace

EmbedParams init_embed(int patch_dim, int patch_count, int hidden, Rng& rng) {
  EmbedParams p;
  p.w_proj = init_weight({patch_dim, hidden}, rng);
  p.e_pos = init_weight({patch_count, hidden}, rng);
  return p;
}

PatchSequence embed(Tape& tape, const Tensor& patches, const EmbedParams& p) {
  return tape.add(tape.matmul(patches, p.w_proj), p.e_pos);
}

namespace {

AttnParams init_attn(int hidden, bool biased, Rng& rng) {
  AttnParams a;
  a.wq = init_weight({hidden, hidden}, rng);
  a.bq = Tensor::zeros({hidden});
  a.wk = init_weight({hidden, hidden}, rng);
  a.bk = Tensor::zeros({hidden});
  a.wv = init_weight({hidden, hidden}, rng);
  a.bv = Tensor::zeros({hidden});
  a.wo = init_weight({hidden, hidden}, rng);
  a.bo = Tensor::zeros({hidden});
  if (biased) a.wb = init_weight({hidden, hidden}, rng);
  return a;
}

BlockParams init_block(const ModelShape& s, bool biased, Rng& rng) {
  BlockParams b;
  b.ln1_g = Tensor::full({s.hidden}, 1.0f);
  b.ln1_b = Tensor::zeros({s.hidden});
  b.attn = init_attn(s.hidden, biased, rng);
  b.ln2_g = Tensor::full({s.hidden}, 1.0f);
  b.ln2_b = Tensor::zeros({s.hidden});
  b.fc1_w = init_weight({s.hidden, s.mlp}, rng);
  b.fc1_b = Tensor::zeros({s.mlp});
  b.fc2_w = init_weight({s.mlp, s.hidden}, rng);
  b.fc2_b = Tensor::zeros({s.hidden});
  return b;
}

void collect_attn(const AttnParams& a, const std::string& p, NamedParams& out) {
  out.add(p + ".wq", a.wq);
  out.add(p + ".bq", a.bq);
  out.add(p + ".wk", a.wk);
  out.add(p + ".bk", a.bk);
  out.add(p + ".wv", a.wv);
  out.add(p + ".bv", a.bv);
  out.add(p + ".wo", a.wo);
  out.add(p + ".bo", a.bo);
  if (a.wb.defined()) out.add(p + ".wb", a.wb);
}

Tensor ln_affine(Tape& tape, const Tensor& x, const Tensor& g, const Tensor& b) {
  return tape.add(tape.mul(tape.layernorm(x), g), b);
}

PatchSequence msa_impl(Tape& tape, const PatchSequence& tokens, const PatchSequence* gb_tokens,
                       const AttnParams& p, int heads, std::vector<Tensor>* attn_rows) {
  const int d = tokens.dim(1);
  if (d % heads != 0) throw ShapeError(cat("msa: hidden ", d, " not divisible by heads ", heads));
  const int dh = d / heads;

  Tensor q = tape.add(tape.matmul(tokens, p.wq), p.bq);
  Tensor k = tape.add(tape.matmul(tokens, p.wk), p.bk);
  Tensor v = tape.add(tape.matmul(tokens, p.wv), p.bv);

  Tensor bias;
  if (gb_tokens != nullptr) {
    if (gb_tokens->shape() != tokens.shape()) {
      throw ShapeError(cat("msa_biased: token streams differ: ", shape_str(tokens.shape()), " vs ",
                           shape_str(gb_tokens->shape())));
    }
    Tensor proj = tape.matmul(*gb_tokens, p.wb);
    bias = tape.matmul(proj, tape.transpose(proj));
  }

  std::vector<Tensor> ctx;
  ctx.reserve(static_cast<size_t>(heads));
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = tape.slice(q, 1, h * dh, dh);
    Tensor kh = tape.slice(k, 1, h * dh, dh);
    Tensor vh = tape.slice(v, 1, h * dh, dh);
    Tensor logits = tape.matmul(qh, tape.transpose(kh));
    if (bias.defined()) logits = tape.add(logits, bias);
    Tensor att = tape.softmax_lastdim(tape.scale(logits, inv_sqrt_dh));
    if (attn_rows != nullptr) attn_rows->push_back(att);
    ctx.push_back(tape.matmul(att, vh));
  }
  Tensor merged = heads == 1 ? ctx[0] : tape.concat(ctx, 1);
  return tape.add(tape.matmul(merged, p.wo), p.bo);
}

}  // namespace

EncoderParams init_encoder(const ModelShape& shape, bool biased, Rng& rng) {
  EncoderParams e;
  e.shape = shape;
  e.biased = biased;
  e.blocks.reserve(static_cast<size_t>(shape.layers));
  for (int i = 0; i < shape.layers; ++i) e.blocks.push_back(init_block(shape, biased, rng));
  return e;
}

void collect_encoder(const EncoderParams& enc, const std::string& prefix, NamedParams& out) {
  for (size_t i = 0; i < enc.blocks.size(); ++i) {
    const std::string p = cat(prefix, ".block", i);
    const BlockParams& b = enc.blocks[i];
    out.add(p + ".ln1_g", b.ln1_g);
    out.add(p + ".ln1_b", b.ln1_b);
    collect_attn(b.attn, p + ".attn", out);
    out.add(p + ".ln2_g", b.ln2_g);
    out.add(p + ".ln2_b", b.ln2_b);
    out.add(p + ".fc1_w", b.fc1_w);
    out.add(p + ".fc1_b", b.fc1_b);
    out.add(p + ".fc2_w", b.fc2_w);
    out.add(p + ".fc2_b", b.fc2_b);
  }
}

PatchSequence msa_standard(Tape& tape, const PatchSequence& tokens, const AttnParams& p, int heads,
                           std::vector<Tensor>* attn_rows) {
  return msa_impl(tape, tokens, nullptr, p, heads, attn_rows);
}

PatchSequence msa_biased(Tape& tape, const PatchSequence& tokens, const PatchSequence& gb_tokens,
                         const AttnParams& p, int heads, std::vector<Tensor>* attn_rows) {
  if (!p.wb.defined()) throw ShapeError("msa_biased: attention params carry no bias projection");
  return msa_impl(tape, tokens, &gb_tokens, p, heads, attn_rows);
}

PatchSequence encoder_forward(Tape& tape, const PatchSequence& tokens, const EncoderParams& enc,
                              const PatchSequence* gb_tokens, std::vector<Tensor>* attn_rows) {
  if (enc.biased && gb_tokens == nullptr) {
    throw ShapeError("encoder_forward: biased encoder requires the second token stream");
  }
  Tensor x = tokens;
  for (const BlockParams& b : enc.blocks) {
    Tensor h1 = ln_affine(tape, x, b.ln1_g, b.ln1_b);
    Tensor a = enc.biased ? msa_biased(tape, h1, *gb_tokens, b.attn, enc.shape.heads, attn_rows)
                          : msa_standard(tape, h1, b.attn, enc.shape.heads, attn_rows);
    x = tape.add(x, a);
    Tensor h2 = ln_affine(tape, x, b.ln2_g, b.ln2_b);
    Tensor m = tape.add(tape.matmul(tape.gelu(tape.add(tape.matmul(h2, b.fc1_w), b.fc1_b)), b.fc2_w), b.fc2_b);
    x = tape.add(x, m);
  }
  return x;
}

Tensor gap(Tape& tape, const PatchSequence& tokens) {
  if (tokens.ndim() != 2 || tokens.dim(0) < 1) {
    throw ShapeError(cat("gap: expected M x D tokens, got ", shape_str(tokens.shape())));
  }
  const int m = tokens.dim(0);
  Tensor w = Tensor::full({1, m}, 1.0f / static_cast<float>(m));
  return tape.reshape(tape.matmul(w, tokens), {tokens.dim(1)});
}

MlpHead init_head(int in_dim, int hidden, int out_dim, Rng& rng) {
  MlpHead h;
  h.w1 = init_weight({in_dim, hidden}, rng);
  h.b1 = Tensor::zeros({hidden});
  h.w2 = init_weight({hidden, out_dim}, rng);
  h.b2 = Tensor::zeros({out_dim});
  return h;
}

void collect_head(const MlpHead& head, const std::string& prefix, NamedParams& out) {
  out.add(prefix + ".w1", head.w1);
  out.add(prefix + ".b1", head.b1);
  out.add(prefix + ".w2", head.w2);
  out.add(prefix + ".b2", head.b2);
}

Tensor head_forward(Tape& tape, const Tensor& z, const MlpHead& head) {
  // Pre-norm stacks leave pooled features at arbitrary scale; the head
  // normalizes before projecting.
  Tensor row = tape.layernorm(tape.reshape(z, {1, z.dim(0)}));
  Tensor h = tape.gelu(tape.add(tape.matmul(row, head.w1), head.b1));
  Tensor logits = tape.add(tape.matmul(h, head.w2), head.b2);
  return tape.reshape(logits, {logits.dim(1)});
}

ViTClassifier ViTClassifier::make(int image_h, int image_w, int image_c, int classes, const ModelShape& shape,
                                  int head_hidden, Rng& rng) {
  shape.validate(image_h, image_w, "vit classifier");
  ViTClassifier m;
  m.image_h = image_h;
  m.image_w = image_w;
  m.image_c = image_c;
  m.classes = classes;
  m.shape = shape;
  const int patch_dim = shape.patch * shape.patch * image_c;
  m.embed_p = init_embed(patch_dim, shape.patch_count(image_h, image_w), shape.hidden, rng);
  m.enc = init_encoder(shape, /*biased=*/false, rng);
  m.head = init_head(shape.hidden, head_hidden, classes, rng);
  return m;
}

Tensor ViTClassifier::forward(Tape& tape, const Tensor& image) const {
  Tensor patches = tape.patchify(image, shape.patch);
  Tensor tokens = embed(tape, patches, embed_p);
  Tensor encoded = encoder_forward(tape, tokens, enc);
  return head_forward(tape, gap(tape, encoded), head);
}

void ViTClassifier::collect(const std::string& prefix, NamedParams& out) const {
  out.add(prefix + ".embed.w_proj", embed_p.w_proj);
  out.add(prefix + ".embed.e_pos", embed_p.e_pos);
  collect_encoder(enc, prefix + ".enc", out);
  collect_head(head, prefix + ".head", out);
}

}  // namespace rvit
