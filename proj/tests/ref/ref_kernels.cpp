#include "ref_kernels.hpp"

#include <cmath>

namespace modnet::ref {

Vec matmul(const Vec& a, const Vec& b, int m, int k, int n) {
  Vec out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

Vec matvec(const Vec& w, const Vec& x, int m, int n) {
  Vec out(m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[i] += w[i * n + j] * x[j];
  return out;
}

Vec mat_tvec(const Vec& w, const Vec& x, int m, int n) {
  Vec out(n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[j] += w[i * n + j] * x[i];
  return out;
}

Vec conv2d(const Vec& x, int h, int w, int ci, const Vec& k, int kh, int kw, int co, int stride) {
  const int ho = (h - kh) / stride + 1;
  const int wo = (w - kw) / stride + 1;
  Vec out(static_cast<size_t>(ho) * wo * co, 0.0);
  for (int oy = 0; oy < ho; ++oy)
    for (int ox = 0; ox < wo; ++ox)
      for (int c = 0; c < co; ++c) {
        double acc = 0;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx)
            for (int ic = 0; ic < ci; ++ic)
              acc += x[((oy * stride + ky) * w + ox * stride + kx) * ci + ic] *
                     k[((ky * kw + kx) * ci + ic) * co + c];
        out[(oy * wo + ox) * co + c] = acc;
      }
  return out;
}

double logsumexp(const Vec& x) {
  double mx = x[0];
  for (double v : x) mx = v > mx ? v : mx;
  double z = 0;
  for (double v : x) z += std::exp(v - mx);
  return mx + std::log(z);
}

Vec softmax(const Vec& x) {
  const double lse = logsumexp(x);
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i] - lse);
  return out;
}

Vec log_softmax(const Vec& x) {
  const double lse = logsumexp(x);
  Vec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

LstmOut lstm_cell(const Vec& x, const Vec& h_prev, const Vec& c_prev, const Vec& w_ih,
                  const Vec& w_hh, const Vec& bias, int input, int hidden) {
  Vec z(4 * hidden, 0.0);
  for (int i = 0; i < 4 * hidden; ++i) {
    double acc = bias[i];
    for (int j = 0; j < input; ++j) acc += w_ih[i * input + j] * x[j];
    for (int j = 0; j < hidden; ++j) acc += w_hh[i * hidden + j] * h_prev[j];
    z[i] = acc;
  }
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  LstmOut out;
  out.h.resize(hidden);
  out.c.resize(hidden);
  for (int i = 0; i < hidden; ++i) {
    const double gi = sig(z[i]);
    const double gf = sig(z[hidden + i]);
    const double gg = std::tanh(z[2 * hidden + i]);
    const double go = sig(z[3 * hidden + i]);
    out.c[i] = gf * c_prev[i] + gi * gg;
    out.h[i] = go * std::tanh(out.c[i]);
  }
  return out;
}

Vec text_feature(const Vec& word_matrix, const Vec& att, int t, int e) {
  Vec out(e, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < e; ++j) out[j] += att[i] * word_matrix[i * e + j];
  return out;
}

namespace {

// 1x1 convolution with bias over [h,w,cin] -> [h,w,cout]
Vec conv1x1_bias(const Vec& x, int h, int w, int ci, const Vec& k, const Vec& b, int co) {
  Vec out(static_cast<size_t>(h) * w * co, 0.0);
  for (int p = 0; p < h * w; ++p)
    for (int c = 0; c < co; ++c) {
      double acc = b[c];
      for (int ic = 0; ic < ci; ++ic) acc += x[p * ci + ic] * k[ic * co + c];
      out[p * co + c] = acc;
    }
  return out;
}

Vec affine(const Vec& w, const Vec& b, const Vec& x, int m, int n) {
  Vec out = matvec(w, x, m, n);
  for (int i = 0; i < m; ++i) out[i] += b[i];
  return out;
}

Vec attended_sum(const Vec& a, const Vec& x_vis, int h, int w, int d) {
  Vec out(d, 0.0);
  for (int p = 0; p < h * w; ++p)
    for (int c = 0; c < d; ++c) out[c] += a[p] * x_vis[p * d + c];
  return out;
}

}  // namespace

Vec find_map(const ModuleDims& md, const Vec& x_vis, const Vec& x_txt, const Vec& conv1_w,
             const Vec& conv1_b, const Vec& conv2_w, const Vec& conv2_b, const Vec& wtxt_w,
             const Vec& wtxt_b) {
  const Vec c1 = conv1x1_bias(x_vis, md.h, md.w, md.d, conv1_w, conv1_b, md.hidden);
  const Vec mt = affine(wtxt_w, wtxt_b, x_txt, md.hidden, md.embed);
  Vec prod(c1.size());
  for (int p = 0; p < md.h * md.w; ++p)
    for (int c = 0; c < md.hidden; ++c) prod[p * md.hidden + c] = c1[p * md.hidden + c] * mt[c];
  return conv1x1_bias(prod, md.h, md.w, md.hidden, conv2_w, conv2_b, 1);
}

Vec relocate_map(const ModuleDims& md, const Vec& a, const Vec& x_vis, const Vec& x_txt,
                 const Vec& conv1_w, const Vec& conv1_b, const Vec& conv2_w, const Vec& conv2_b,
                 const Vec& wsum_w, const Vec& wsum_b, const Vec& wtxt_w, const Vec& wtxt_b) {
  const Vec c1 = conv1x1_bias(x_vis, md.h, md.w, md.d, conv1_w, conv1_b, md.hidden);
  const Vec pooled = affine(wsum_w, wsum_b, attended_sum(a, x_vis, md.h, md.w, md.d), md.hidden,
                            md.d);
  const Vec mt = affine(wtxt_w, wtxt_b, x_txt, md.hidden, md.embed);
  Vec prod(c1.size());
  for (int p = 0; p < md.h * md.w; ++p)
    for (int c = 0; c < md.hidden; ++c)
      prod[p * md.hidden + c] = c1[p * md.hidden + c] * pooled[c] * mt[c];
  return conv1x1_bias(prod, md.h, md.w, md.hidden, conv2_w, conv2_b, 1);
}

Vec vec_augment(const Vec& a) {
  Vec out = a;
  double mx = a[0], mn = a[0];
  for (double v : a) {
    mx = v > mx ? v : mx;
    mn = v < mn ? v : mn;
  }
  out.push_back(mx);
  out.push_back(mn);
  return out;
}

Vec single_reduce(const ModuleDims& md, const Vec& a, const Vec& w, const Vec& b) {
  const Vec v = vec_augment(a);
  return affine(w, b, v, md.answers, static_cast<int>(v.size()));
}

Vec describe_scores(const ModuleDims& md, const Vec& a, const Vec& x_vis, const Vec& x_txt,
                    const Vec& wout_w, const Vec& wout_b, const Vec& wsum_w, const Vec& wsum_b,
                    const Vec& wtxt_w, const Vec& wtxt_b) {
  const Vec pooled = affine(wsum_w, wsum_b, attended_sum(a, x_vis, md.h, md.w, md.d), md.hidden,
                            md.d);
  const Vec mt = affine(wtxt_w, wtxt_b, x_txt, md.hidden, md.embed);
  Vec h(md.hidden);
  for (int i = 0; i < md.hidden; ++i) h[i] = pooled[i] * mt[i];
  return affine(wout_w, wout_b, h, md.answers, md.hidden);
}

Vec pair_reduce(const ModuleDims& md, const Vec& a1, const Vec& a2, const Vec& w1, const Vec& b1,
                const Vec& w2, const Vec& b2) {
  const Vec y1 = single_reduce(md, a1, w1, b1);
  const Vec y2 = single_reduce(md, a2, w2, b2);
  Vec out(md.answers);
  for (int i = 0; i < md.answers; ++i) out[i] = y1[i] + y2[i];
  return out;
}

Vec compare_scores(const ModuleDims& md, const Vec& a1, const Vec& a2, const Vec& x_vis,
                   const Vec& x_txt, const Vec& wout_w, const Vec& wout_b, const Vec& wsum1_w,
                   const Vec& wsum1_b, const Vec& wsum2_w, const Vec& wsum2_b, const Vec& wtxt_w,
                   const Vec& wtxt_b) {
  const Vec p1 = affine(wsum1_w, wsum1_b, attended_sum(a1, x_vis, md.h, md.w, md.d), md.hidden,
                        md.d);
  const Vec p2 = affine(wsum2_w, wsum2_b, attended_sum(a2, x_vis, md.h, md.w, md.d), md.hidden,
                        md.d);
  const Vec mt = affine(wtxt_w, wtxt_b, x_txt, md.hidden, md.embed);
  Vec h(md.hidden);
  for (int i = 0; i < md.hidden; ++i) h[i] = p1[i] * p2[i] * mt[i];
  return affine(wout_w, wout_b, h, md.answers, md.hidden);
}

}  // namespace modnet::ref
