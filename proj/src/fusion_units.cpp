#include "han/fusion_units.hpp"

#include <cmath>

#include "han/error.hpp"

namespace han {

SeuParams make_seu_params(std::size_t groups) { return {Tensor({groups}), Tensor({groups})}; }

CeuParams make_ceu_params(std::size_t kernel_size) { return {Tensor({kernel_size})}; }

CmeuParams make_cmeu_params(std::size_t channels, std::size_t inner_width) {
  return {Tensor({channels}, 1.0),         Tensor({channels}),
          Tensor({channels, inner_width}), Tensor({channels, inner_width}),
          Tensor({channels, inner_width}), Tensor({inner_width, channels})};
}

SeuParams zeros_like(const SeuParams& p) { return {Tensor(p.gamma.dims()), Tensor(p.beta.dims())}; }

CeuParams zeros_like(const CeuParams& p) { return {Tensor(p.kernel.dims())}; }

CmeuParams zeros_like(const CmeuParams& p) {
  return {Tensor(p.norm_scale.dims()), Tensor(p.norm_shift.dims()), Tensor(p.wq.dims()),
          Tensor(p.wk.dims()),         Tensor(p.wv.dims()),         Tensor(p.wo.dims())};
}

namespace {

// View a C x H x W map as a C x (H*W) matrix (copy).
Tensor as_planes(const FeatureMap& f) {
  return Tensor({f.dim(0), f.dim(1) * f.dim(2)}, std::vector<double>(f.values().begin(), f.values().end()));
}

FeatureMap from_planes(const Tensor& m, const std::vector<std::size_t>& dims) {
  return Tensor(dims, std::vector<double>(m.values().begin(), m.values().end()));
}

void check_groups(const FeatureMap& f, const SeuParams& p, std::size_t groups) {
  require_feature_map(f, "seu");
  if (groups == 0 || f.dim(0) % groups != 0) throw ConfigError("G", "G must divide C");
  if (p.gamma.size() != groups || p.beta.size() != groups) {
    throw ShapeError("seu: gamma/beta length must equal G");
  }
}

// Per-group similarity map a[s][pos] = <mean of group s, F_s(:, pos)>.
Tensor seu_similarity(const FeatureMap& f, std::size_t groups, Tensor& group_means) {
  const std::size_t per_group = f.dim(0) / groups;
  const std::size_t plane = f.dim(1) * f.dim(2);
  group_means = spatial_pool(f, PoolMode::Average);
  Tensor a({groups, plane});
  for (std::size_t s = 0; s < groups; ++s) {
    for (std::size_t cc = 0; cc < per_group; ++cc) {
      const std::size_t c = s * per_group + cc;
      const double m = group_means[c];
      auto ch = f.channel(c);
      for (std::size_t pos = 0; pos < plane; ++pos) a(s, pos) += m * ch[pos];
    }
  }
  return a;
}

}  // namespace

Tensor seu_attention(const FeatureMap& f, const SeuParams& p, std::size_t groups, double eps) {
  check_groups(f, p, groups);
  Tensor means;
  const Tensor normed = normalize_spatial(seu_similarity(f, groups, means), eps);
  Tensor att(normed.dims());
  for (std::size_t s = 0; s < groups; ++s) {
    for (std::size_t pos = 0; pos < normed.cols(); ++pos) {
      att(s, pos) = sigmoid(p.gamma[s] * normed(s, pos) + p.beta[s]);
    }
  }
  return att;
}

FeatureMap seu_forward(const FeatureMap& f, const SeuParams& p, std::size_t groups, double eps) {
  const Tensor att = seu_attention(f, p, groups, eps);
  const std::size_t per_group = f.dim(0) / groups;
  FeatureMap out = f;
  for (std::size_t c = 0; c < f.dim(0); ++c) {
    auto ch = out.channel(c);
    const std::size_t s = c / per_group;
    for (std::size_t pos = 0; pos < ch.size(); ++pos) ch[pos] *= att(s, pos);
  }
  return out;
}

FeatureMap seu_backward(const FeatureMap& f, const SeuParams& p, std::size_t groups,
                        const FeatureMap& grad_out, SeuParams& grad_p, double eps) {
  check_groups(f, p, groups);
  require_same_shape(f, grad_out, "seu_backward");
  if (grad_p.gamma.empty()) grad_p = zeros_like(p);

  const std::size_t channels = f.dim(0);
  const std::size_t per_group = channels / groups;
  const std::size_t plane = f.dim(1) * f.dim(2);

  Tensor means;
  const Tensor sim = seu_similarity(f, groups, means);
  const Tensor normed = normalize_spatial(sim, eps);

  FeatureMap grad_in(f.dims());
  Tensor grad_normed({groups, plane});
  for (std::size_t s = 0; s < groups; ++s) {
    for (std::size_t pos = 0; pos < plane; ++pos) {
      const double att = sigmoid(p.gamma[s] * normed(s, pos) + p.beta[s]);
      double g_att = 0.0;
      for (std::size_t cc = 0; cc < per_group; ++cc) {
        const std::size_t c = s * per_group + cc;
        g_att += grad_out.channel(c)[pos] * f.channel(c)[pos];
        grad_in.channel(c)[pos] += att * grad_out.channel(c)[pos];
      }
      const double g_pre = g_att * att * (1.0 - att);
      grad_p.gamma[s] += g_pre * normed(s, pos);
      grad_p.beta[s] += g_pre;
      grad_normed(s, pos) = g_pre * p.gamma[s];
    }
  }

  const Tensor grad_sim = normalize_spatial_backward(sim, grad_normed, eps);
  const double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t s = c / per_group;
    auto ch = f.channel(c);
    auto gi = grad_in.channel(c);
    double g_mean = 0.0;
    for (std::size_t pos = 0; pos < plane; ++pos) {
      g_mean += grad_sim(s, pos) * ch[pos];
      gi[pos] += grad_sim(s, pos) * means[c];
    }
    for (std::size_t pos = 0; pos < plane; ++pos) gi[pos] += g_mean * inv_plane;
  }
  return grad_in;
}

Tensor ceu_gates(const FeatureMap& f, const CeuParams& p) {
  require_feature_map(f, "ceu");
  Tensor z = conv1d_same(spatial_pool(f, PoolMode::Average), p.kernel);
  for (double& v : z.values()) v = sigmoid(v);
  return z;
}

FeatureMap ceu_forward(const FeatureMap& f, const CeuParams& p) {
  const Tensor gates = ceu_gates(f, p);
  FeatureMap out = f;
  for (std::size_t c = 0; c < f.dim(0); ++c) {
    for (double& v : out.channel(c)) v *= gates[c];
  }
  return out;
}

FeatureMap ceu_backward(const FeatureMap& f, const CeuParams& p, const FeatureMap& grad_out,
                        CeuParams& grad_p) {
  require_feature_map(f, "ceu_backward");
  require_same_shape(f, grad_out, "ceu_backward");
  if (grad_p.kernel.empty()) grad_p = zeros_like(p);

  const Tensor pooled = spatial_pool(f, PoolMode::Average);
  const Tensor gates = ceu_gates(f, p);
  const std::size_t channels = f.dim(0);
  const std::size_t plane = f.dim(1) * f.dim(2);

  FeatureMap grad_in(f.dims());
  Tensor grad_z({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    auto go = grad_out.channel(c);
    auto gi = grad_in.channel(c);
    const double g_gate = dot(go, f.channel(c));
    grad_z[c] = g_gate * gates[c] * (1.0 - gates[c]);
    for (std::size_t pos = 0; pos < plane; ++pos) gi[pos] = gates[c] * go[pos];
  }

  Tensor grad_pooled;
  conv1d_same_backward(pooled, p.kernel, grad_z, grad_pooled, grad_p.kernel);
  const double inv_plane = 1.0 / static_cast<double>(plane);
  for (std::size_t c = 0; c < channels; ++c) {
    for (double& v : grad_in.channel(c)) v += grad_pooled[c] * inv_plane;
  }
  return grad_in;
}

namespace {

void check_cmeu(const FeatureMap& query, const FeatureMap& key_value, const CmeuParams& p) {
  require_feature_map(query, "cmeu query");
  require_feature_map(key_value, "cmeu key/value");
  require_same_shape(query, key_value, "cmeu");
  const std::size_t channels = query.dim(0);
  if (p.norm_scale.size() != channels || p.norm_shift.size() != channels) {
    throw ShapeError("cmeu: normalization affine length must equal C");
  }
  const std::size_t inner = p.wq.rank() == 2 ? p.wq.dim(1) : 0;
  if (inner == 0 || p.wq.dims() != std::vector<std::size_t>{channels, inner} || p.wk.dims() != p.wq.dims() ||
      p.wv.dims() != p.wq.dims() || p.wo.dims() != std::vector<std::size_t>{inner, channels}) {
    throw ShapeError("cmeu: projection shapes must be Wq,Wk,Wv: C x c and Wo: c x C");
  }
}

// Per-channel standardization with affine, laid out position-major {HW, C}.
Tensor channel_norm(const FeatureMap& f, const CmeuParams& p, double eps, Tensor* standardized) {
  const Tensor std_planes = normalize_spatial(as_planes(f), eps);
  Tensor out({std_planes.cols(), std_planes.rows()});
  for (std::size_t c = 0; c < std_planes.rows(); ++c) {
    for (std::size_t pos = 0; pos < std_planes.cols(); ++pos) {
      out(pos, c) = p.norm_scale[c] * std_planes(c, pos) + p.norm_shift[c];
    }
  }
  if (standardized) *standardized = std_planes;
  return out;
}

FeatureMap channel_norm_backward(const FeatureMap& f, const Tensor& standardized, const CmeuParams& p,
                                 const Tensor& grad_norm, CmeuParams& grad_p, double eps) {
  Tensor grad_std(standardized.dims());
  for (std::size_t c = 0; c < standardized.rows(); ++c) {
    for (std::size_t pos = 0; pos < standardized.cols(); ++pos) {
      const double g = grad_norm(pos, c);
      grad_p.norm_scale[c] += g * standardized(c, pos);
      grad_p.norm_shift[c] += g;
      grad_std(c, pos) = g * p.norm_scale[c];
    }
  }
  return from_planes(normalize_spatial_backward(as_planes(f), grad_std, eps), f.dims());
}

}  // namespace

CmeuIntermediates cmeu_evaluate(const FeatureMap& query, const FeatureMap& key_value,
                                const CmeuParams& p, double eps) {
  check_cmeu(query, key_value, p);
  CmeuIntermediates r;
  r.query_norm = channel_norm(query, p, eps, nullptr);
  r.kv_norm = channel_norm(key_value, p, eps, nullptr);
  r.q = matmul(r.query_norm, p.wq);
  r.k = matmul(r.kv_norm, p.wk);
  r.v = matmul(r.kv_norm, p.wv);
  Tensor scores = matmul(r.q, transpose(r.k));
  scores *= 1.0 / std::sqrt(static_cast<double>(p.inner_width()));
  r.attention = softmax_rows(scores);
  r.context = matmul(r.attention, r.v);
  const Tensor projected = matmul(r.context, p.wo);  // {HW, C}
  r.output = query;
  for (std::size_t c = 0; c < query.dim(0); ++c) {
    auto ch = r.output.channel(c);
    for (std::size_t pos = 0; pos < ch.size(); ++pos) ch[pos] += projected(pos, c);
  }
  return r;
}

FeatureMap cmeu_forward(const FeatureMap& query, const FeatureMap& key_value, const CmeuParams& p,
                        double eps) {
  return cmeu_evaluate(query, key_value, p, eps).output;
}

CmeuInputGrads cmeu_backward(const FeatureMap& query, const FeatureMap& key_value,
                             const CmeuParams& p, const FeatureMap& grad_out, CmeuParams& grad_p,
                             double eps) {
  check_cmeu(query, key_value, p);
  require_same_shape(query, grad_out, "cmeu_backward");
  if (grad_p.wq.empty()) grad_p = zeros_like(p);

  Tensor q_std, kv_std;
  const Tensor query_norm = channel_norm(query, p, eps, &q_std);
  const Tensor kv_norm = channel_norm(key_value, p, eps, &kv_std);
  const Tensor q = matmul(query_norm, p.wq);
  const Tensor k = matmul(kv_norm, p.wk);
  const Tensor v = matmul(kv_norm, p.wv);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.inner_width()));
  Tensor scores = matmul(q, transpose(k));
  scores *= scale;
  const Tensor att = softmax_rows(scores);
  const Tensor context = matmul(att, v);

  const std::size_t channels = query.dim(0);
  const std::size_t plane = query.dim(1) * query.dim(2);
  Tensor grad_proj({plane, channels});
  for (std::size_t c = 0; c < channels; ++c) {
    auto go = grad_out.channel(c);
    for (std::size_t pos = 0; pos < plane; ++pos) grad_proj(pos, c) = go[pos];
  }

  grad_p.wo += matmul(transpose(context), grad_proj);
  const Tensor grad_context = matmul(grad_proj, transpose(p.wo));
  const Tensor grad_att = matmul(grad_context, transpose(v));
  const Tensor grad_v = matmul(transpose(att), grad_context);
  Tensor grad_scores = softmax_rows_backward(att, grad_att);
  grad_scores *= scale;
  const Tensor grad_q = matmul(grad_scores, k);
  const Tensor grad_k = matmul(transpose(grad_scores), q);

  grad_p.wq += matmul(transpose(query_norm), grad_q);
  grad_p.wk += matmul(transpose(kv_norm), grad_k);
  grad_p.wv += matmul(transpose(kv_norm), grad_v);

  const Tensor grad_query_norm = matmul(grad_q, transpose(p.wq));
  Tensor grad_kv_norm = matmul(grad_k, transpose(p.wk));
  grad_kv_norm += matmul(grad_v, transpose(p.wv));

  CmeuInputGrads g;
  g.query = channel_norm_backward(query, q_std, p, grad_query_norm, grad_p, eps);
  g.query += grad_out;
  g.key_value = channel_norm_backward(key_value, kv_std, p, grad_kv_norm, grad_p, eps);
  return g;
}

}  // namespace han
