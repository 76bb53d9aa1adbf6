// SPDX-License-Identifier: Apache-2.0
#include "pkt/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pkt/error.hpp"
#include "pkt/rng.hpp"

namespace pkt::tinylm {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kRmsEps = 1e-5;

struct RoleInfo {
  Role role;
  std::string_view text;
};

constexpr RoleInfo kRoles[] = {
    {Role::kEmbedTok, "embed.tok"}, {Role::kEmbedPos, "embed.pos"}, {Role::kAttnWq, "attn.wq"},
    {Role::kAttnWk, "attn.wk"},     {Role::kAttnWv, "attn.wv"},     {Role::kAttnWo, "attn.wo"},
    {Role::kFfnW1, "ffn.w1"},       {Role::kFfnW2, "ffn.w2"},       {Role::kFfnW3, "ffn.w3"},
    {Role::kHeadOut, "head.out"},   {Role::kNorm, "norm"},
};

}  // namespace

std::string_view to_string(Role role) {
  for (const auto& r : kRoles)
    if (r.role == role) return r.text;
  return "?";
}

Role role_from_string(std::string_view text) {
  for (const auto& r : kRoles)
    if (r.text == text) return r.role;
  fail(ErrorKind::kInvalidInput, "unknown role '" + std::string(text) + "'");
}

bool is_matrix_role(Role role) { return role != Role::kNorm; }

void ModelConfig::validate() const {
  require(vocab_size >= 1 && max_seq_len >= 1 && num_layers >= 1 && hidden_dim >= 1 &&
              num_heads >= 1 && ffn_dim >= 1,
          ErrorKind::kConfig, "all model dimensions must be >= 1");
  require(hidden_dim % num_heads == 0, ErrorKind::kConfig,
          "hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
              std::to_string(num_heads));
}

std::string ParamName::str() const {
  std::string out;
  if (layer >= 0) out = "layer" + std::to_string(layer) + ".";
  out += to_string(role);
  if (!qualifier.empty()) out += "." + qualifier;
  return out;
}

ParamName ParamName::parse(std::string_view text) {
  ParamName name;
  std::string_view rest = text;
  if (rest.starts_with("layer")) {
    const auto dot = rest.find('.');
    require(dot != std::string_view::npos && dot > 5, ErrorKind::kInvalidInput,
            "malformed parameter name '" + std::string(text) + "'");
    const std::string digits(rest.substr(5, dot - 5));
    require(std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }),
            ErrorKind::kInvalidInput, "malformed layer index in '" + std::string(text) + "'");
    name.layer = std::stoi(digits);
    rest = rest.substr(dot + 1);
  }
  if (rest.starts_with("norm")) {
    name.role = Role::kNorm;
    require(rest.size() > 5 && rest[4] == '.', ErrorKind::kInvalidInput,
            "norm name without qualifier: '" + std::string(text) + "'");
    name.qualifier = std::string(rest.substr(5));
    return name;
  }
  name.role = role_from_string(rest);
  return name;
}

std::vector<std::size_t> ParamEntry::shape() const {
  if (is_vector) return {value.cols()};
  return {value.rows(), value.cols()};
}

void ParamStore::insert(ParamName name, DenseMatrix value, bool is_vector) {
  std::string key = name.str();
  require(!entries_.contains(key), ErrorKind::kInvalidInput, "duplicate parameter '" + key + "'");
  require(!is_vector || value.rows() == 1, ErrorKind::kShape, "vector parameter must be 1 x n");
  entries_.emplace(std::move(key), ParamEntry{std::move(name), std::move(value), is_vector});
}

const ParamEntry& ParamStore::entry(std::string_view name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::kInvalidInput, "no parameter named '" + std::string(name) + "'");
  return it->second;
}

ParamEntry& ParamStore::entry(std::string_view name) {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::kInvalidInput, "no parameter named '" + std::string(name) + "'");
  return it->second;
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& [_, e] : entries_)
    out.insert(e.name, DenseMatrix(e.value.rows(), e.value.cols()), e.is_vector);
  return out;
}

bool ParamStore::congruent(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [key, e] : entries_) {
    if (key != it->first || e.shape() != it->second.shape()) return false;
    ++it;
  }
  return true;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (!a.congruent(b)) return false;
  auto it = b.entries_.begin();
  for (const auto& [_, e] : a.entries_) {
    if (!(e.value == it->second.value)) return false;
    ++it;
  }
  return true;
}

TokenBatch TokenBatch::full_sequence(std::vector<std::vector<Token>> sequences) {
  TokenBatch batch;
  batch.loss_mask.reserve(sequences.size());
  for (const auto& s : sequences) batch.loss_mask.emplace_back(s.size(), true);
  batch.sequences = std::move(sequences);
  return batch;
}

std::size_t TokenBatch::num_targets() const {
  std::size_t n = 0;
  for (const auto& m : loss_mask)
    for (std::size_t t = 1; t < m.size(); ++t) n += m[t] ? 1 : 0;
  return n;
}

std::pair<std::size_t, std::size_t> expected_shape(const ModelConfig& cfg, const ParamName& name) {
  const std::size_t d = cfg.hidden_dim;
  switch (name.role) {
    case Role::kEmbedTok: return {cfg.vocab_size, d};
    case Role::kEmbedPos: return {cfg.max_seq_len, d};
    case Role::kAttnWq:
    case Role::kAttnWk:
    case Role::kAttnWv:
    case Role::kAttnWo: return {d, d};
    case Role::kFfnW1:
    case Role::kFfnW3: return {d, cfg.ffn_dim};
    case Role::kFfnW2: return {cfg.ffn_dim, d};
    case Role::kHeadOut: return {d, cfg.vocab_size};
    case Role::kNorm: return {1, d};
  }
  fail(ErrorKind::kInvalidInput, "unknown role");
}

std::vector<ParamName> parameter_names(const ModelConfig& cfg) {
  std::vector<ParamName> names;
  names.push_back({-1, Role::kEmbedTok, ""});
  names.push_back({-1, Role::kEmbedPos, ""});
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const int li = static_cast<int>(l);
    names.push_back({li, Role::kNorm, "attn"});
    for (Role r : kLayerMatrixRoles) names.push_back({li, r, ""});
    names.push_back({li, Role::kNorm, "ffn"});
  }
  names.push_back({-1, Role::kNorm, "final"});
  names.push_back({-1, Role::kHeadOut, ""});
  std::sort(names.begin(), names.end(),
            [](const ParamName& a, const ParamName& b) { return a.str() < b.str(); });
  return names;
}

Model init_model(const ModelConfig& cfg) {
  cfg.validate();
  Model model{cfg, {}};
  Rng rng(cfg.seed, "init_model");
  // Draw order follows the sorted parameter names, which fixes the stream.
  for (const ParamName& name : parameter_names(cfg)) {
    auto [rows, cols] = expected_shape(cfg, name);
    DenseMatrix value(rows, cols);
    if (name.role == Role::kNorm) {
      value.fill(1.0);
    } else if (name.role != Role::kHeadOut) {
      for (double& v : value.values()) v = rng.normal(0.0, kInitStd);
    }
    model.params.insert(name, std::move(value), name.role == Role::kNorm);
  }
  return model;
}

void validate_batch(const ModelConfig& cfg, const TokenBatch& batch) {
  require(!batch.sequences.empty(), ErrorKind::kData, "batch is empty");
  require(batch.loss_mask.size() == batch.sequences.size(), ErrorKind::kData,
          "loss mask does not match batch size");
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    const auto& seq = batch.sequences[s];
    require(seq.size() >= 2, ErrorKind::kData, "sequence " + std::to_string(s) + " is shorter than 2 tokens");
    require(seq.size() <= cfg.max_seq_len, ErrorKind::kData,
            "sequence " + std::to_string(s) + " has length " + std::to_string(seq.size()) +
                " > max_seq_len " + std::to_string(cfg.max_seq_len));
    require(batch.loss_mask[s].size() == seq.size(), ErrorKind::kData,
            "loss mask length differs from sequence " + std::to_string(s));
    for (Token t : seq)
      require(t < cfg.vocab_size, ErrorKind::kData,
              "token id " + std::to_string(t) + " out of range for vocab " + std::to_string(cfg.vocab_size));
  }
  require(batch.num_targets() >= 1, ErrorKind::kData, "batch has no masked-in target positions");
}

// ---------------------------------------------------------------------------
// Kernels on row-major buffers.

namespace {

// C[N x M] = A[N x K] * W[K x M]
void gemm(const double* a, std::size_t n, std::size_t k, const double* w, std::size_t m, double* c) {
  std::fill(c, c + n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* wp = w + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * wp[j];
    }
  }
}

// dA[N x K] += dC[N x M] * W^T, with W given as a K x M buffer. Runs as
// row updates against W^T so the inner loop is a contiguous axpy.
void gemm_grad_input(const double* dc, std::size_t n, std::size_t m, const double* w, std::size_t k,
                     double* da) {
  std::vector<double> wt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) wt[j * k + p] = w[p * m + j];
  for (std::size_t i = 0; i < n; ++i) {
    const double* dci = dc + i * m;
    double* dai = da + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double g = dci[j];
      if (g == 0.0) continue;
      const double* wtj = wt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) dai[p] += g * wtj[p];
    }
  }
}

// dW[K x M] += A^T[K x N] * dC[N x M]
void gemm_grad_weight(const double* a, std::size_t n, std::size_t k, const double* dc, std::size_t m,
                      double* dw) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* dci = dc + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* dwp = dw + p * m;
      for (std::size_t j = 0; j < m; ++j) dwp[j] += aip * dci[j];
    }
  }
}

void rms_norm(const double* x, std::size_t n, std::size_t d, const double* g, double* y,
              double* inv_rms) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * d;
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xi[j] * xi[j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    inv_rms[i] = r;
    double* yi = y + i * d;
    for (std::size_t j = 0; j < d; ++j) yi[j] = xi[j] * r * g[j];
  }
}

// dx += d(norm)/dx applied to dy; dg += sum over rows of dy * x * r.
void rms_norm_backward(const double* x, std::size_t n, std::size_t d, const double* g,
                       const double* inv_rms, const double* dy, double* dx, double* dg) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x + i * d;
    const double* dyi = dy + i * d;
    const double r = inv_rms[i];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg[j] += dyi[j] * xi[j] * r;
      dot += dyi[j] * g[j] * xi[j];
    }
    const double coef = r * r * r * dot / static_cast<double>(d);
    double* dxi = dx + i * d;
    for (std::size_t j = 0; j < d; ++j) dxi[j] += r * dyi[j] * g[j] - coef * xi[j];
  }
}

double sigmoid(double a) { return 1.0 / (1.0 + std::exp(-a)); }

struct LayerWeights {
  const DenseMatrix* norm_attn;
  const DenseMatrix* wq;
  const DenseMatrix* wk;
  const DenseMatrix* wv;
  const DenseMatrix* wo;
  const DenseMatrix* norm_ffn;
  const DenseMatrix* w1;
  const DenseMatrix* w2;
  const DenseMatrix* w3;
};

struct LayerNames {
  std::string norm_attn, wq, wk, wv, wo, norm_ffn, w1, w2, w3;
};

LayerNames layer_names(std::size_t l) {
  const int li = static_cast<int>(l);
  return {ParamName{li, Role::kNorm, "attn"}.str(), ParamName{li, Role::kAttnWq, ""}.str(),
          ParamName{li, Role::kAttnWk, ""}.str(),   ParamName{li, Role::kAttnWv, ""}.str(),
          ParamName{li, Role::kAttnWo, ""}.str(),   ParamName{li, Role::kNorm, "ffn"}.str(),
          ParamName{li, Role::kFfnW1, ""}.str(),    ParamName{li, Role::kFfnW2, ""}.str(),
          ParamName{li, Role::kFfnW3, ""}.str()};
}

struct LayerCache {
  std::vector<double> x_in, inv_rms1, h1, q, k, v, probs, ctx, x_mid, inv_rms2, h2, a1, a3, u;
};

// Flattened token layout: sequence s occupies rows [offset[s], offset[s] + len[s]).
struct Layout {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> len;
  std::vector<std::size_t> prob_offset;  // into per-layer attention probabilities
  std::size_t rows = 0;
  std::size_t prob_size = 0;
};

class Network {
 public:
  Network(const Model& model, std::vector<std::span<const Token>> inputs)
      : cfg_(model.config), params_(model.params), inputs_(std::move(inputs)) {
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      LayerNames n = layer_names(l);
      weights_.push_back({&params_.at(n.norm_attn), &params_.at(n.wq), &params_.at(n.wk),
                          &params_.at(n.wv), &params_.at(n.wo), &params_.at(n.norm_ffn),
                          &params_.at(n.w1), &params_.at(n.w2), &params_.at(n.w3)});
    }
    for (const auto& in : inputs_) {
      layout_.offset.push_back(layout_.rows);
      layout_.len.push_back(in.size());
      layout_.prob_offset.push_back(layout_.prob_size);
      layout_.rows += in.size();
      layout_.prob_size += cfg_.num_heads * in.size() * in.size();
    }
  }

  // Runs all blocks and the final norm; fills hf_ (rows x d).
  void forward() {
    const std::size_t n = layout_.rows;
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t f = cfg_.ffn_dim;
    const auto& tok = params_.at("embed.tok");
    const auto& pos = params_.at("embed.pos");

    std::vector<double> x(n * d);
    for (std::size_t s = 0; s < inputs_.size(); ++s) {
      for (std::size_t t = 0; t < layout_.len[s]; ++t) {
        double* xr = x.data() + (layout_.offset[s] + t) * d;
        auto te = tok.row(inputs_[s][t]);
        auto pe = pos.row(t);
        for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
      }
    }

    caches_.assign(cfg_.num_layers, {});
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      const LayerWeights& w = weights_[l];
      LayerCache& c = caches_[l];
      c.x_in = x;
      c.inv_rms1.resize(n);
      c.h1.resize(n * d);
      rms_norm(x.data(), n, d, w.norm_attn->values().data(), c.h1.data(), c.inv_rms1.data());
      c.q.resize(n * d);
      c.k.resize(n * d);
      c.v.resize(n * d);
      gemm(c.h1.data(), n, d, w.wq->values().data(), d, c.q.data());
      gemm(c.h1.data(), n, d, w.wk->values().data(), d, c.k.data());
      gemm(c.h1.data(), n, d, w.wv->values().data(), d, c.v.data());
      attention_forward(c);
      std::vector<double> proj(n * d);
      gemm(c.ctx.data(), n, d, w.wo->values().data(), d, proj.data());
      for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
      c.x_mid = x;

      c.inv_rms2.resize(n);
      c.h2.resize(n * d);
      rms_norm(x.data(), n, d, w.norm_ffn->values().data(), c.h2.data(), c.inv_rms2.data());
      c.a1.resize(n * f);
      c.a3.resize(n * f);
      c.u.resize(n * f);
      gemm(c.h2.data(), n, d, w.w1->values().data(), f, c.a1.data());
      gemm(c.h2.data(), n, d, w.w3->values().data(), f, c.a3.data());
      for (std::size_t i = 0; i < n * f; ++i) {
        const double a = c.a1[i];
        c.u[i] = a * sigmoid(a) * c.a3[i];
      }
      gemm(c.u.data(), n, f, w.w2->values().data(), d, proj.data());
      for (std::size_t i = 0; i < n * d; ++i) x[i] += proj[i];
    }
    x_final_ = std::move(x);
    inv_rms_f_.resize(n);
    hf_.resize(n * d);
    rms_norm(x_final_.data(), n, d, params_.at("norm.final").values().data(), hf_.data(),
             inv_rms_f_.data());
  }

  // Logits for the given flattened rows (rows.size() x vocab).
  std::vector<double> logits(const std::vector<std::size_t>& rows) const {
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t vsz = cfg_.vocab_size;
    std::vector<double> sel(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(hf_.data() + rows[i] * d, d, sel.data() + i * d);
    std::vector<double> out(rows.size() * vsz);
    gemm(sel.data(), rows.size(), d, params_.at("head.out").values().data(), vsz, out.data());
    return out;
  }

  // Backpropagates d(loss)/d(logits) at the given rows into grad.
  void backward(const std::vector<std::size_t>& rows, const std::vector<double>& dlogits,
                ParamStore& grad) const {
    const std::size_t n = layout_.rows;
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t f = cfg_.ffn_dim;
    const std::size_t vsz = cfg_.vocab_size;
    const auto& head = params_.at("head.out");

    std::vector<double> sel(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(hf_.data() + rows[i] * d, d, sel.data() + i * d);
    gemm_grad_weight(sel.data(), rows.size(), d, dlogits.data(), vsz,
                     grad.at("head.out").values().data());
    std::vector<double> dsel(rows.size() * d, 0.0);
    gemm_grad_input(dlogits.data(), rows.size(), vsz, head.values().data(), d, dsel.data());
    std::vector<double> dhf(n * d, 0.0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dhf[rows[i] * d + j] += dsel[i * d + j];

    std::vector<double> dx(n * d, 0.0);
    rms_norm_backward(x_final_.data(), n, d, params_.at("norm.final").values().data(),
                      inv_rms_f_.data(), dhf.data(), dx.data(),
                      grad.at("norm.final").values().data());

    for (std::size_t li = cfg_.num_layers; li-- > 0;) {
      const LayerWeights& w = weights_[li];
      const LayerCache& c = caches_[li];
      const LayerNames names = layer_names(li);

      // FFN branch: x_out = x_mid + (silu(h2 W1) * (h2 W3)) W2
      gemm_grad_weight(c.u.data(), n, f, dx.data(), d, grad.at(names.w2).values().data());
      std::vector<double> du(n * f, 0.0);
      gemm_grad_input(dx.data(), n, d, w.w2->values().data(), f, du.data());
      std::vector<double> da1(n * f), da3(n * f);
      for (std::size_t i = 0; i < n * f; ++i) {
        const double a = c.a1[i];
        const double sg = sigmoid(a);
        const double silu = a * sg;
        da1[i] = du[i] * c.a3[i] * sg * (1.0 + a * (1.0 - sg));
        da3[i] = du[i] * silu;
      }
      gemm_grad_weight(c.h2.data(), n, d, da1.data(), f, grad.at(names.w1).values().data());
      gemm_grad_weight(c.h2.data(), n, d, da3.data(), f, grad.at(names.w3).values().data());
      std::vector<double> dh2(n * d, 0.0);
      gemm_grad_input(da1.data(), n, f, w.w1->values().data(), d, dh2.data());
      gemm_grad_input(da3.data(), n, f, w.w3->values().data(), d, dh2.data());
      rms_norm_backward(c.x_mid.data(), n, d, w.norm_ffn->values().data(), c.inv_rms2.data(),
                        dh2.data(), dx.data(), grad.at(names.norm_ffn).values().data());

      // Attention branch: x_mid = x_in + attn(h1) Wo
      gemm_grad_weight(c.ctx.data(), n, d, dx.data(), d, grad.at(names.wo).values().data());
      std::vector<double> dctx(n * d, 0.0);
      gemm_grad_input(dx.data(), n, d, w.wo->values().data(), d, dctx.data());
      std::vector<double> dq(n * d, 0.0), dk(n * d, 0.0), dv(n * d, 0.0);
      attention_backward(c, dctx, dq, dk, dv);
      gemm_grad_weight(c.h1.data(), n, d, dq.data(), d, grad.at(names.wq).values().data());
      gemm_grad_weight(c.h1.data(), n, d, dk.data(), d, grad.at(names.wk).values().data());
      gemm_grad_weight(c.h1.data(), n, d, dv.data(), d, grad.at(names.wv).values().data());
      std::vector<double> dh1(n * d, 0.0);
      gemm_grad_input(dq.data(), n, d, w.wq->values().data(), d, dh1.data());
      gemm_grad_input(dk.data(), n, d, w.wk->values().data(), d, dh1.data());
      gemm_grad_input(dv.data(), n, d, w.wv->values().data(), d, dh1.data());
      rms_norm_backward(c.x_in.data(), n, d, w.norm_attn->values().data(), c.inv_rms1.data(),
                        dh1.data(), dx.data(), grad.at(names.norm_attn).values().data());
    }

    auto& dtok = grad.at("embed.tok");
    auto& dpos = grad.at("embed.pos");
    for (std::size_t s = 0; s < inputs_.size(); ++s) {
      for (std::size_t t = 0; t < layout_.len[s]; ++t) {
        const double* dxr = dx.data() + (layout_.offset[s] + t) * d;
        auto te = dtok.row(inputs_[s][t]);
        auto pe = dpos.row(t);
        for (std::size_t j = 0; j < d; ++j) {
          te[j] += dxr[j];
          pe[j] += dxr[j];
        }
      }
    }
  }

  const Layout& layout() const { return layout_; }

 private:
  void attention_forward(LayerCache& c) const {
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t nh = cfg_.num_heads;
    const std::size_t hd = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    c.probs.assign(layout_.prob_size, 0.0);
    c.ctx.assign(layout_.rows * d, 0.0);
    std::vector<double> scores;
    for (std::size_t s = 0; s < layout_.len.size(); ++s) {
      const std::size_t len = layout_.len[s];
      const std::size_t base = layout_.offset[s];
      for (std::size_t h = 0; h < nh; ++h) {
        double* p = c.probs.data() + layout_.prob_offset[s] + h * len * len;
        for (std::size_t t = 0; t < len; ++t) {
          const double* qt = c.q.data() + (base + t) * d + h * hd;
          double mx = -INFINITY;
          scores.assign(t + 1, 0.0);
          for (std::size_t u = 0; u <= t; ++u) {
            const double* ku = c.k.data() + (base + u) * d + h * hd;
            double acc = 0.0;
            for (std::size_t j = 0; j < hd; ++j) acc += qt[j] * ku[j];
            scores[u] = acc * scale;
            mx = std::max(mx, scores[u]);
          }
          double z = 0.0;
          for (std::size_t u = 0; u <= t; ++u) {
            scores[u] = std::exp(scores[u] - mx);
            z += scores[u];
          }
          double* out = c.ctx.data() + (base + t) * d + h * hd;
          for (std::size_t u = 0; u <= t; ++u) {
            const double pu = scores[u] / z;
            p[t * len + u] = pu;
            const double* vu = c.v.data() + (base + u) * d + h * hd;
            for (std::size_t j = 0; j < hd; ++j) out[j] += pu * vu[j];
          }
        }
      }
    }
  }

  void attention_backward(const LayerCache& c, const std::vector<double>& dctx,
                          std::vector<double>& dq, std::vector<double>& dk,
                          std::vector<double>& dv) const {
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t nh = cfg_.num_heads;
    const std::size_t hd = cfg_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> dp;
    for (std::size_t s = 0; s < layout_.len.size(); ++s) {
      const std::size_t len = layout_.len[s];
      const std::size_t base = layout_.offset[s];
      for (std::size_t h = 0; h < nh; ++h) {
        const double* p = c.probs.data() + layout_.prob_offset[s] + h * len * len;
        for (std::size_t t = 0; t < len; ++t) {
          const double* dct = dctx.data() + (base + t) * d + h * hd;
          dp.assign(t + 1, 0.0);
          double weighted = 0.0;
          for (std::size_t u = 0; u <= t; ++u) {
            const double* vu = c.v.data() + (base + u) * d + h * hd;
            double* dvu = dv.data() + (base + u) * d + h * hd;
            const double pu = p[t * len + u];
            double acc = 0.0;
            for (std::size_t j = 0; j < hd; ++j) {
              acc += dct[j] * vu[j];
              dvu[j] += pu * dct[j];
            }
            dp[u] = acc;
            weighted += pu * acc;
          }
          const double* qt = c.q.data() + (base + t) * d + h * hd;
          double* dqt = dq.data() + (base + t) * d + h * hd;
          for (std::size_t u = 0; u <= t; ++u) {
            const double ds = p[t * len + u] * (dp[u] - weighted) * scale;
            if (ds == 0.0) continue;
            const double* ku = c.k.data() + (base + u) * d + h * hd;
            double* dku = dk.data() + (base + u) * d + h * hd;
            for (std::size_t j = 0; j < hd; ++j) {
              dqt[j] += ds * ku[j];
              dku[j] += ds * qt[j];
            }
          }
        }
      }
    }
  }

  const ModelConfig& cfg_;
  const ParamStore& params_;
  std::vector<std::span<const Token>> inputs_;
  std::vector<LayerWeights> weights_;
  Layout layout_;
  std::vector<LayerCache> caches_;
  std::vector<double> x_final_, inv_rms_f_, hf_;
};

struct Targets {
  std::vector<std::size_t> rows;
  std::vector<Token> labels;
};

Targets collect_targets(const TokenBatch& batch, const Layout& layout) {
  Targets out;
  for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
    for (std::size_t t = 1; t < batch.sequences[s].size(); ++t) {
      if (!batch.loss_mask[s][t]) continue;
      out.rows.push_back(layout.offset[s] + t - 1);
      out.labels.push_back(batch.sequences[s][t]);
    }
  }
  return out;
}

std::vector<std::span<const Token>> training_inputs(const TokenBatch& batch) {
  std::vector<std::span<const Token>> inputs;
  inputs.reserve(batch.sequences.size());
  for (const auto& seq : batch.sequences) inputs.emplace_back(seq.data(), seq.size() - 1);
  return inputs;
}

// Mean cross-entropy; when dlogits is non-null it receives d(loss)/d(logits).
double cross_entropy(const std::vector<double>& logits, const std::vector<Token>& labels,
                     std::size_t vocab, std::vector<double>* dlogits) {
  const std::size_t m = labels.size();
  const double inv_m = 1.0 / static_cast<double>(m);
  double total = 0.0;
  if (dlogits) dlogits->assign(logits.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* z = logits.data() + i * vocab;
    const double mx = *std::max_element(z, z + vocab);
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(z[j] - mx);
    const double lse = mx + std::log(sum);
    total += lse - z[labels[i]];
    if (dlogits) {
      double* dz = dlogits->data() + i * vocab;
      for (std::size_t j = 0; j < vocab; ++j) dz[j] = std::exp(z[j] - lse) * inv_m;
      dz[labels[i]] -= inv_m;
    }
  }
  return total * inv_m;
}

}  // namespace

double forward_loss(const Model& model, const TokenBatch& batch) {
  validate_batch(model.config, batch);
  Network net(model, training_inputs(batch));
  net.forward();
  Targets targets = collect_targets(batch, net.layout());
  return cross_entropy(net.logits(targets.rows), targets.labels, model.config.vocab_size, nullptr);
}

LossAndGrad loss_and_grad(const Model& model, const TokenBatch& batch) {
  validate_batch(model.config, batch);
  Network net(model, training_inputs(batch));
  net.forward();
  Targets targets = collect_targets(batch, net.layout());
  std::vector<double> dlogits;
  LossAndGrad out;
  out.loss = cross_entropy(net.logits(targets.rows), targets.labels, model.config.vocab_size, &dlogits);
  out.grad = model.params.zeros_like();
  net.backward(targets.rows, dlogits, out.grad);
  return out;
}

ParamStore backward(const Model& model, const TokenBatch& batch) {
  return loss_and_grad(model, batch).grad;
}

std::vector<double> next_token_logits(const Model& model, const std::vector<Token>& tokens) {
  require(!tokens.empty(), ErrorKind::kData, "empty token sequence");
  require(tokens.size() <= model.config.max_seq_len, ErrorKind::kData,
          "sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
              std::to_string(model.config.max_seq_len));
  for (Token t : tokens)
    require(t < model.config.vocab_size, ErrorKind::kData, "token id " + std::to_string(t) + " out of range");
  Network net(model, {std::span<const Token>(tokens)});
  net.forward();
  return net.logits({tokens.size() - 1});
}

std::vector<Token> generate(const Model& model, const std::vector<Token>& prompt, std::size_t max_new) {
  require(!prompt.empty(), ErrorKind::kData, "prompt is empty");
  require(prompt.size() <= model.config.max_seq_len, ErrorKind::kData,
          "prompt length " + std::to_string(prompt.size()) + " exceeds max_seq_len " +
              std::to_string(model.config.max_seq_len));
  std::vector<Token> out = prompt;
  for (std::size_t step = 0; step < max_new && out.size() < model.config.max_seq_len; ++step) {
    const std::vector<double> z = next_token_logits(model, out);
    // max_element returns the first maximum, i.e. the lowest token id.
    out.push_back(static_cast<Token>(std::max_element(z.begin(), z.end()) - z.begin()));
  }
  return out;
}

}  // namespace pkt::tinylm
