#include "criticgate/model.hpp"

#include <algorithm>
#include <cmath>

namespace criticgate {

namespace {

constexpr double kLnEps = 1e-5;

// Base init scales. Wq/Wk carry an identity component so that untrained
// attention already scores token-identity matches; LoRA then reshapes
// these patterns instead of discovering matching from nothing.
constexpr double kEmbStd = 0.125;  // 1/sqrt(64)
constexpr double kPosStd = 0.04;
constexpr double kQkIdentity = 1.2;
constexpr double kQkNoiseStd = 0.04;
constexpr double kVoStd = 0.05;
constexpr double kFfStd = 0.09;
constexpr double kUnembStd = 0.125;
// The two verdict rows of the unembedding read a fixed pair of hidden
// channels, the way a pretrained verifier would already own a usable
// output direction; adapters only have to route evidence into it.
constexpr double kVerdictReadout = 3.0;

// Structured-base parameters. A model pretrained on byte sequences owns a
// small set of stereotyped circuits: content-matching heads, a
// previous-token head, and an induction head wired off its output. The
// base weights reproduce that circuit family so the adapters only have to
// repurpose existing attention patterns, not invent them. Hidden layout:
// dims [0, d-16) carry token content, [d-16, d-8) carry a sinusoidal
// position code, [d-8, d-2) are a scratch band holding a compressed code
// of the previous token, and the last two channels are the verdict axis.
constexpr double kPosAmp = 0.45;         // sinusoid amplitude per channel
constexpr double kAlignGamma = 1.0;      // input gain of the duplicate-flag units
constexpr double kAlignBeta = 0.4;       // write strength of the duplicate flag
constexpr double kPrevScale = 1.0;      // previous-token head QK gain
constexpr double kCopyScale = 1.0;      // token-code copy into scratch
// The last layer's special head averages a random code of each position's
// bigram (own token + the previous-token code from the scratch band) over
// the whole prefix. Repeated spans make the same code appear several
// times, so the squared norm of the average — which the frozen FFN's
// random features expose — grows with how much text is duplicated.
constexpr double kHistTokScale = 1.0;
constexpr double kHistPrevScale = 1.0;
constexpr double kHistGain = 8.0;
constexpr double kHistMixStd = 0.08;
constexpr double kMatchValScale = 1.0;   // pos code exposed by match values
constexpr double kMatchWriteScale = 1.5; // gain into the match bands
constexpr double kSqrt2 = 1.4142135623730951;

// Embedding norms scale with inverse token frequency, as they do in
// pretrained models: frequent bytes sit close to the origin, rare ones
// far out. Matching and duplicate statistics are then dominated by the
// informative rare bytes instead of whitespace and common letters.
// Frequencies are rough English text rates; anything unlisted is rare.
double byte_freq(int b) {
    static const std::pair<char, double> tbl[] = {
        {' ', 0.165}, {'e', 0.093}, {'t', 0.067}, {'a', 0.060}, {'o', 0.057},
        {'n', 0.052}, {'i', 0.051}, {'s', 0.047}, {'r', 0.044}, {'h', 0.042},
        {'l', 0.030}, {'d', 0.029}, {'u', 0.021}, {'c', 0.020}, {'m', 0.018},
        {'f', 0.016}, {'w', 0.014}, {'g', 0.014}, {'y', 0.013}, {'p', 0.012},
        {'b', 0.011}, {'v', 0.008}, {'k', 0.006}, {'.', 0.008}, {',', 0.007},
        {'\n', 0.015}, {'x', 0.002}, {'j', 0.001}, {'q', 0.001}, {'z', 0.001}};
    for (auto [c, f] : tbl)
        if (b == c) return f;
    if (b >= '0' && b <= '9') return 0.004;
    if (b >= 'A' && b <= 'Z') return 0.003;
    return 0.002;
}

double rarity_scale(int b) {
    return std::clamp(0.32 / std::sqrt(byte_freq(b) + 0.0008), 0.7, 2.0);
}
constexpr double kRarityMix = 0.0;  // 0 = uniform norms, 1 = full scaling
constexpr int kSinWavelengths[4] = {4, 8, 32, 512};

inline double gelu(double x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x);
}

// C (n x m) += A (n x k) * B (k x m); row-major raw buffers. The j-inner
// loop keeps accumulators independent so it vectorizes without any
// reassociation flags.
void gemm_acc(int n, int k, int m, const double* A, const double* B, double* C,
              double scale = 1.0) {
    for (int i = 0; i < n; ++i) {
        const double* arow = A + static_cast<size_t>(i) * k;
        double* crow = C + static_cast<size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
            const double a = scale * arow[p];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<size_t>(p) * m;
            for (int j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

// C (k x m) += s * A^T (k x n) * B (n x m) for A (n x k), B (n x m).
void gemm_atb_acc(int n, int k, int m, double s, const double* A, const double* B, double* C) {
    for (int t = 0; t < n; ++t) {
        const double* arow = A + static_cast<size_t>(t) * k;
        const double* brow = B + static_cast<size_t>(t) * m;
        for (int i = 0; i < k; ++i) {
            const double a = s * arow[i];
            if (a == 0.0) continue;
            double* crow = C + static_cast<size_t>(i) * m;
            for (int j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

void transpose_into(const Matrix& w, std::vector<double>& out, double scale = 1.0) {
    out.assign(w.data.size(), 0.0);
    for (int i = 0; i < w.rows; ++i) {
        const double* row = w.row(i);
        for (int j = 0; j < w.cols; ++j)
            out[static_cast<size_t>(j) * w.rows + i] = scale * row[j];
    }
}

void layer_norm_row(const double* x, int d, const double* g, const double* b, double* y,
                    double* xhat, double& rstd) {
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += x[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= d;
    rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        xhat[i] = (x[i] - mu) * rstd;
        y[i] = g[i] * xhat[i] + b[i];
    }
}

void layer_norm_backward_row(const double* dy, const double* xhat, double rstd, int d,
                             const double* g, double* dx_acc) {
    double m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < d; ++i) {
        const double dxh = g[i] * dy[i];
        m1 += dxh;
        m2 += dxh * xhat[i];
    }
    m1 /= d;
    m2 /= d;
    for (int i = 0; i < d; ++i) {
        const double dxh = g[i] * dy[i];
        dx_acc[i] += rstd * (dxh - m1 - xhat[i] * m2);
    }
}

// Per-call transposed weight views (weights are small; the copies are
// noise next to the GEMMs they enable).
struct LayerView {
    std::vector<double> wqT, wkT, wvT, woT;      // d x d
    std::vector<double> aqT, akT, avT, aoT;      // d x r
    std::vector<double> bqTs, bkTs, bvTs, boTs;  // r x d, pre-scaled by alpha/r
    std::vector<double> w1T;                     // d x d_ff
    std::vector<double> w2T;                     // d_ff x d
};

struct ModelView {
    std::vector<LayerView> layers;
    std::vector<double> unembT;  // d x vocab
};

ModelView make_view(const CriticModel& m) {
    ModelView v;
    v.layers.resize(m.layers.size());
    for (size_t l = 0; l < m.layers.size(); ++l) {
        const LayerWeights& lw = m.layers[l];
        const AttnLora& al = m.adapters[l];
        LayerView& lv = v.layers[l];
        transpose_into(lw.wq, lv.wqT);
        transpose_into(lw.wk, lv.wkT);
        transpose_into(lw.wv, lv.wvT);
        transpose_into(lw.wo, lv.woT);
        transpose_into(al.q.A, lv.aqT);
        transpose_into(al.k.A, lv.akT);
        transpose_into(al.v.A, lv.avT);
        transpose_into(al.o.A, lv.aoT);
        transpose_into(al.q.B, lv.bqTs, al.q.scale());
        transpose_into(al.k.B, lv.bkTs, al.k.scale());
        transpose_into(al.v.B, lv.bvTs, al.v.scale());
        transpose_into(al.o.B, lv.boTs, al.o.scale());
        transpose_into(lw.w1, lv.w1T);
        transpose_into(lw.w2, lv.w2T);
    }
    transpose_into(m.unemb, v.unembT);
    return v;
}

void resize_cache(ForwardCache& c, const ModelConfig& cfg, int L) {
    const size_t Ld = static_cast<size_t>(L) * cfg.d_model;
    const size_t Lr = static_cast<size_t>(L) * cfg.lora_rank;
    const size_t Lf = static_cast<size_t>(L) * cfg.d_ff;
    c.L = L;
    c.h0.assign(Ld, 0.0);
    c.layer.resize(cfg.n_layers);
    for (auto& lc : c.layer) {
        lc.xhat1.assign(Ld, 0.0);
        lc.rstd1.assign(L, 0.0);
        lc.x_ln1.assign(Ld, 0.0);
        lc.q.assign(Ld, 0.0);
        lc.k.assign(Ld, 0.0);
        lc.v.assign(Ld, 0.0);
        lc.aq.assign(Lr, 0.0);
        lc.ak.assign(Lr, 0.0);
        lc.av.assign(Lr, 0.0);
        lc.ao.assign(Lr, 0.0);
        // Scores are written, not accumulated, so the big L*L buffer only
        // needs capacity; rows above the causal diagonal are never read.
        lc.probs.resize(static_cast<size_t>(cfg.n_heads) * L * L);
        lc.ctx.assign(Ld, 0.0);
        lc.h_mid.assign(Ld, 0.0);
        lc.xhat2.assign(Ld, 0.0);
        lc.rstd2.assign(L, 0.0);
        lc.x_ln2.assign(Ld, 0.0);
        lc.u1.assign(Lf, 0.0);
        lc.act.assign(Lf, 0.0);
        lc.h_out.assign(Ld, 0.0);
    }
    c.lnf_xhat.assign(cfg.d_model, 0.0);
}

// Forward pass over one sequence. Returns the final hidden state row via
// the cache; logits are computed by the caller from c.lnf_xhat.
void forward_internal(const CriticModel& m, const ModelView& view,
                      std::span<const TokenId> tokens, ForwardCache& c,
                      std::vector<double>& logits_out, bool final_only = false) {
    const ModelConfig& cfg = m.cfg;
    const int L = static_cast<int>(tokens.size());
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int r = cfg.lora_rank;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    resize_cache(c, cfg, L);

    for (int t = 0; t < L; ++t) {
        const TokenId id = tokens[t];
        if (id < 0 || id >= cfg.vocab_size)
            throw std::out_of_range("forward_prefill: token id out of range");
        const double* te = m.tok_emb.row(id);
        const double* pe = m.pos_emb.row(t);
        double* h = &c.h0[static_cast<size_t>(t) * d];
        for (int i = 0; i < d; ++i) h[i] = te[i] + pe[i];
    }

    std::vector<double> headbuf(static_cast<size_t>(L) * hd * 3);

    const std::vector<double>* h_in = &c.h0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = m.layers[l];
        const LayerView& lv = view.layers[l];
        auto& lc = c.layer[l];
        // Inference only reads the final position's logits, so on the last
        // layer the query/attention/FFN work collapses to one row; keys and
        // values still cover the whole prefix.
        const bool lite = final_only && l == cfg.n_layers - 1;
        const int t0 = lite ? L - 1 : 0;
        const int nq = L - t0;
        const size_t t0d = static_cast<size_t>(t0) * d;

        for (int t = 0; t < L; ++t) {
            const size_t td = static_cast<size_t>(t) * d;
            layer_norm_row(&(*h_in)[td], d, lw.ln1_g.data.data(), lw.ln1_b.data.data(),
                           &lc.x_ln1[td], &lc.xhat1[td], lc.rstd1[t]);
        }

        // Q = X W_q^T + (X A_q^T) (s B_q)^T, likewise K and V.
        gemm_acc(nq, d, r, lc.x_ln1.data() + t0d, lv.aqT.data(), lc.aq.data() + t0 * r);
        gemm_acc(L, d, r, lc.x_ln1.data(), lv.akT.data(), lc.ak.data());
        gemm_acc(L, d, r, lc.x_ln1.data(), lv.avT.data(), lc.av.data());
        gemm_acc(nq, d, d, lc.x_ln1.data() + t0d, lv.wqT.data(), lc.q.data() + t0d);
        gemm_acc(L, d, d, lc.x_ln1.data(), lv.wkT.data(), lc.k.data());
        gemm_acc(L, d, d, lc.x_ln1.data(), lv.wvT.data(), lc.v.data());
        gemm_acc(nq, r, d, lc.aq.data() + t0 * r, lv.bqTs.data(), lc.q.data() + t0d);
        gemm_acc(L, r, d, lc.ak.data(), lv.bkTs.data(), lc.k.data());
        gemm_acc(L, r, d, lc.av.data(), lv.bvTs.data(), lc.v.data());

        for (int h = 0; h < cfg.n_heads; ++h) {
            const int off = h * hd;
            double* P = &lc.probs[static_cast<size_t>(h) * L * L];
            for (int t = t0; t < L; ++t) {
                double* srow = P + static_cast<size_t>(t) * L;
                const double* qt = &lc.q[static_cast<size_t>(t) * d + off];
                // Scores as contiguous head-dim dot products; both operands
                // sit in one cache line pair, so this vectorizes cleanly.
                for (int u = 0; u <= t; ++u) {
                    const double* ku = &lc.k[static_cast<size_t>(u) * d + off];
                    double s = 0.0;
                    for (int i = 0; i < hd; ++i) s += qt[i] * ku[i];
                    srow[u] = s * inv_sqrt_hd;
                }
                double mx = srow[0];
                for (int u = 1; u <= t; ++u) mx = std::max(mx, srow[u]);
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    srow[u] = std::exp(srow[u] - mx);
                    z += srow[u];
                }
                const double inv_z = 1.0 / z;
                double* ct = &lc.ctx[static_cast<size_t>(t) * d + off];
                std::fill(ct, ct + hd, 0.0);
                for (int u = 0; u <= t; ++u) {
                    srow[u] *= inv_z;
                    const double p = srow[u];
                    const double* vu = &lc.v[static_cast<size_t>(u) * d + off];
                    for (int i = 0; i < hd; ++i) ct[i] += p * vu[i];
                }
            }
        }

        // Output projection + residual.
        gemm_acc(nq, d, r, lc.ctx.data() + t0d, lv.aoT.data(), lc.ao.data() + t0 * r);
        std::copy(h_in->begin() + t0d, h_in->end(), lc.h_mid.begin() + t0d);
        gemm_acc(nq, d, d, lc.ctx.data() + t0d, lv.woT.data(), lc.h_mid.data() + t0d);
        gemm_acc(nq, r, d, lc.ao.data() + t0 * r, lv.boTs.data(), lc.h_mid.data() + t0d);

        for (int t = t0; t < L; ++t) {
            const size_t td = static_cast<size_t>(t) * d;
            layer_norm_row(&lc.h_mid[td], d, lw.ln2_g.data.data(), lw.ln2_b.data.data(),
                           &lc.x_ln2[td], &lc.xhat2[td], lc.rstd2[t]);
        }
        const size_t t0f = static_cast<size_t>(t0) * cfg.d_ff;
        gemm_acc(nq, d, cfg.d_ff, lc.x_ln2.data() + t0d, lv.w1T.data(), lc.u1.data() + t0f);
        for (size_t i = t0f; i < lc.u1.size(); ++i) lc.act[i] = gelu(lc.u1[i]);
        std::copy(lc.h_mid.begin() + t0d, lc.h_mid.end(), lc.h_out.begin() + t0d);
        gemm_acc(nq, cfg.d_ff, d, lc.act.data() + t0f, lv.w2T.data(), lc.h_out.data() + t0d);
        h_in = &lc.h_out;
    }

    const size_t last = static_cast<size_t>(L - 1) * d;
    std::vector<double> hf(d, 0.0);
    layer_norm_row(&(*h_in)[last], d, m.lnf_g.data.data(), m.lnf_b.data.data(), hf.data(),
                   c.lnf_xhat.data(), c.lnf_rstd);
    logits_out.assign(cfg.vocab_size, 0.0);
    gemm_acc(1, d, cfg.vocab_size, hf.data(), view.unembT.data(), logits_out.data());
}

}  // namespace

AdapterGrads AdapterGrads::zeros_like(const CriticModel& m) {
    AdapterGrads g;
    g.layers.resize(m.adapters.size());
    for (size_t l = 0; l < m.adapters.size(); ++l) {
        auto init = [&](const LoraAdapter& ad, Site& s) {
            s.gB = Matrix(ad.B.rows, ad.B.cols);
            s.gA = Matrix(ad.A.rows, ad.A.cols);
        };
        init(m.adapters[l].q, g.layers[l].q);
        init(m.adapters[l].k, g.layers[l].k);
        init(m.adapters[l].v, g.layers[l].v);
        init(m.adapters[l].o, g.layers[l].o);
    }
    return g;
}

void AdapterGrads::zero() {
    for (auto& l : layers)
        for (auto* s : {&l.q, &l.k, &l.v, &l.o}) {
            s->gB.fill(0.0);
            s->gA.fill(0.0);
        }
}

void AdapterGrads::scale(double sc) {
    for (auto& l : layers)
        for (auto* s : {&l.q, &l.k, &l.v, &l.o}) {
            for (double& x : s->gB.data) x *= sc;
            for (double& x : s->gA.data) x *= sc;
        }
}

void AdapterGrads::add(const AdapterGrads& other) {
    for (size_t l = 0; l < layers.size(); ++l) {
        auto acc = [](Matrix& a, const Matrix& b) {
            for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
        };
        for (auto pair : {std::pair{&layers[l].q, &other.layers[l].q},
                          std::pair{&layers[l].k, &other.layers[l].k},
                          std::pair{&layers[l].v, &other.layers[l].v},
                          std::pair{&layers[l].o, &other.layers[l].o}}) {
            acc(pair.first->gB, pair.second->gB);
            acc(pair.first->gA, pair.second->gA);
        }
    }
}

CriticModel build_model(const ModelConfig& cfg) {
    cfg.validate();
    CriticModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(cfg.init_seed);
    const int d = cfg.d_model;

    const int head_dim = d / cfg.n_heads;
    // The structured circuits need room for the three hidden bands and a
    // 16-wide head to host them; small test configs fall back to the plain
    // random-plus-identity init.
    const bool structured =
        d >= 64 && head_dim >= 16 && cfg.n_layers >= 2 && cfg.n_heads >= 2;
    const int tokd = d / 2;    // token-content band [0, tokd)
    const int mb0 = d / 2;     // two match-position bands [mb0, mb0+16)
    const int posd = d - 16;   // position band [posd, posd+8)
    const int sc0 = d - 8;     // scratch band [sc0, sc0+6); d-2, d-1 verdict
    const int ncode = 5;
    const int align_ch = sc0 + 5;  // per-position duplicate-alignment flag

    m.tok_emb = Matrix(cfg.vocab_size, d);
    m.tok_emb.fill_normal(rng, kEmbStd);
    m.pos_emb = Matrix(cfg.max_ctx, d);
    m.pos_emb.fill_normal(rng, kPosStd);
    if (structured) {
        // Token identity lives in the content band only; position is a
        // four-pair sinusoidal code whose wavelengths jointly identify
        // every offset within the context window.
        for (int t = 0; t < cfg.vocab_size; ++t) {
            const double rs = t < 256 ? rarity_scale(t) * kRarityMix + (1.0 - kRarityMix) : 1.0;
            for (int i = 0; i < tokd; ++i) m.tok_emb.at(t, i) *= rs;
            for (int i = tokd; i < d; ++i) m.tok_emb.at(t, i) *= 0.1;
        }
        m.pos_emb.fill(0.0);
        for (int t = 0; t < cfg.max_ctx; ++t) {
            for (int p = 0; p < 4; ++p) {
                const double w = 2.0 * M_PI / kSinWavelengths[p];
                m.pos_emb.at(t, posd + 2 * p) = kPosAmp * std::cos(w * t);
                m.pos_emb.at(t, posd + 2 * p + 1) = kPosAmp * std::sin(w * t);
            }
        }
    }

    // Shared compression codes: Pcopy maps token content to the scratch
    // code written by the previous-token head; Pval feeds the histogram
    // head; Pfull compresses the whole token band into one head's match
    // space.
    Matrix Pcopy(ncode, tokd > 0 ? tokd : 1);
    Pcopy.fill_normal(rng, 1.0 / std::sqrt(std::max(tokd, 1)));
    Matrix Pval(8, tokd > 0 ? tokd : 1);
    Pval.fill_normal(rng, 1.0 / std::sqrt(std::max(tokd, 1)));
    Matrix Pfull(16, tokd > 0 ? tokd : 1);
    Pfull.fill_normal(rng, 1.0 / std::sqrt(std::max(tokd, 1)));

    std::normal_distribution<double> nrm(0.0, 1.0);
    m.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lw = m.layers[l];
        lw.ln1_g = Matrix(1, d);
        lw.ln1_g.fill(1.0);
        lw.ln1_b = Matrix(1, d);
        lw.ln2_g = Matrix(1, d);
        lw.ln2_g.fill(1.0);
        lw.ln2_b = Matrix(1, d);
        auto qk_init = [&](Matrix& w) {
            w = Matrix(d, d);
            w.fill_normal(rng, kQkNoiseStd);
            const int id_dims = structured ? tokd : d;
            for (int i = 0; i < id_dims; ++i) w.at(i, i) += kQkIdentity;
        };
        qk_init(lw.wq);
        qk_init(lw.wk);
        lw.wv = Matrix(d, d);
        lw.wv.fill_normal(rng, kVoStd);
        lw.wo = Matrix(d, d);
        lw.wo.fill_normal(rng, kVoStd);

        const int h0 = d - head_dim;  // slice of the last head
        if (structured && l == 0) {
            // First two heads: content matching on token-band halves,
            // with the matched positions' sinusoidal codes as values,
            // routed into the two match-position bands. A token that
            // occurs only once reads back its own position; a duplicated
            // token reads back a blend shifted toward its earlier copies,
            // so the FFN can flag nearby duplicates per position.
            for (int hh = 0; hh < 2 && 16 * hh + 16 <= tokd; ++hh) {
                const int s = 16 * hh;  // head slice start
                for (int i = s; i < s + 8; ++i)
                    for (int c = 0; c < d; ++c) lw.wv.at(i, c) = 0.0;
                for (int i = 0; i < 8; ++i)
                    lw.wv.at(s + i, posd + i) = kMatchValScale;
            }
            for (int i = mb0; i < posd; ++i)
                for (int c = 0; c < d; ++c) lw.wo.at(i, c) = 0.0;
            for (int i = 0; i < 8; ++i) {
                lw.wo.at(mb0 + i, i) = kMatchWriteScale;
                if (mb0 + 8 + i < posd) lw.wo.at(mb0 + 8 + i, 16 + i) = kMatchWriteScale;
            }
            // Third head: content matching over the full token band
            // through a random compression, so matches are judged on the
            // whole byte code rather than a half.
            for (int i = 0; i < 16 && mb0 + i < posd; ++i)
                for (int c = 0; c < tokd; ++c) {
                    lw.wq.at(mb0 + i, c) += kQkIdentity * kSqrt2 * Pfull.at(i, c);
                    lw.wk.at(mb0 + i, c) += kQkIdentity * kSqrt2 * Pfull.at(i, c);
                }
            // Query rotates each sinusoid pair back one position, so the
            // score q_i . k_j peaks exactly at j = i - 1.
            for (int p = 0; p < 4; ++p) {
                const double w = 2.0 * M_PI / kSinWavelengths[p];
                const int r = posd + 2 * p;
                for (int c = std::max(h0, posd); c < d; ++c) {
                    lw.wq.at(r, c) = 0.0;
                    lw.wq.at(r + 1, c) = 0.0;
                    lw.wk.at(r, c) = 0.0;
                    lw.wk.at(r + 1, c) = 0.0;
                }
                lw.wq.at(r, r) = kPrevScale * std::cos(w);
                lw.wq.at(r, r + 1) = kPrevScale * std::sin(w);
                lw.wq.at(r + 1, r) = -kPrevScale * std::sin(w);
                lw.wq.at(r + 1, r + 1) = kPrevScale * std::cos(w);
                lw.wk.at(r, r) = kPrevScale;
                lw.wk.at(r + 1, r + 1) = kPrevScale;
            }
            for (int i = sc0; i < d; ++i)
                for (int c = 0; c < d; ++c) {
                    lw.wq.at(i, c) = 0.0;
                    lw.wk.at(i, c) = 0.0;
                }
            // Value carries a compressed code of the attended (previous)
            // token; the output projection writes it verbatim into the
            // scratch band and keeps the verdict channels untouched.
            for (int i = h0; i < d; ++i)
                for (int c = 0; c < d; ++c) lw.wv.at(i, c) = 0.0;
            for (int i = 0; i < ncode; ++i)
                for (int c = 0; c < tokd; ++c)
                    lw.wv.at(sc0 + i, c) = kCopyScale * Pcopy.at(i, c);
            for (int i = sc0; i < d; ++i)
                for (int c = 0; c < d; ++c) lw.wo.at(i, c) = 0.0;
            for (int i = 0; i < ncode; ++i) lw.wo.at(sc0 + i, sc0 + i) = 1.0;
        } else if (structured && l == cfg.n_layers - 1) {
            // Bigram-histogram head: zero queries and keys give uniform
            // attention, so the head's output is the mean bigram code of
            // the prefix. The output projection writes it back over the
            // position/scratch channels (their per-position job is done
            // by now) with enough gain that the duplicate statistic
            // survives the final normalization.
            for (int i = h0; i < d; ++i)
                for (int c = 0; c < d; ++c) {
                    lw.wq.at(i, c) = 0.0;
                    lw.wk.at(i, c) = 0.0;
                    lw.wv.at(i, c) = 0.0;
                }
            for (int i = 0; i < 8 && h0 + i < sc0; ++i)
                for (int c = 0; c < tokd; ++c)
                    lw.wv.at(h0 + i, c) = kHistTokScale * Pval.at(i, c);
            for (int i = 0; i < 6; ++i)
                lw.wv.at(sc0 + i, sc0 + i) = kHistPrevScale;
            // The histogram value also samples the whole residual, so the
            // averaged code picks up the first block's nonlinear mixes
            // (which separate n-grams sharing a byte) on top of the raw
            // token and previous-token reads.
            for (int i = h0; i < d - 2; ++i)
                for (int c = 0; c < d; ++c)
                    lw.wv.at(i, c) += kHistMixStd * nrm(rng);
            for (int i = h0; i < d - 2; ++i)
                for (int c = 0; c < d; ++c) lw.wo.at(i, c) = 0.0;
            for (int i = h0; i < d - 2; ++i) lw.wo.at(i, i) = kHistGain;
        }

        lw.w1 = Matrix(cfg.d_ff, d);
        lw.w1.fill_normal(rng, kFfStd);
        lw.w2 = Matrix(d, cfg.d_ff);
        lw.w2.fill_normal(rng, kFfStd * 0.5);

        if (structured && l == 0 && cfg.d_ff >= 24) {
            // Per-position duplicate flag. The match bands hold the mean
            // position code of same-content matches (including self), so
            // the inner product between a match code and the position's
            // own code is high for tokens that occur once and drops when
            // an earlier copy pulls the match code away. GELU is even
            // plus odd; summing a unit and its negation keeps the even
            // (quadratic) part, and differencing shifted pairs yields the
            // product m*p. The result is accumulated in one scratch
            // channel, which the mean-pooling head upstairs turns into a
            // sequence-level duplication statistic. Only the three short
            // wavelengths enter: the long pair barely moves between
            // nearby positions and would mask the effect.
            for (int c = 0; c < cfg.d_ff; ++c) lw.w2.at(align_ch, c) = 0.0;
            for (int k = 0; k < 6; ++k) {
                const int mcol = mb0 + k, pcol = posd + k;
                const double sq[4] = {kAlignGamma, -kAlignGamma, kAlignGamma, -kAlignGamma};
                const double sp[4] = {kAlignGamma, -kAlignGamma, -kAlignGamma, kAlignGamma};
                const double sout[4] = {kAlignBeta, kAlignBeta, -kAlignBeta, -kAlignBeta};
                for (int u = 0; u < 4; ++u) {
                    const int row = 4 * k + u;
                    for (int c = 0; c < d; ++c) lw.w1.at(row, c) = 0.0;
                    lw.w1.at(row, mcol) = sq[u];
                    lw.w1.at(row, pcol) = sp[u];
                    for (int c = 0; c < d; ++c) lw.w2.at(c, row) = 0.0;
                    lw.w2.at(align_ch, row) = sout[u];
                }
            }
        }
    }

    m.lnf_g = Matrix(1, d);
    m.lnf_g.fill(1.0);
    m.lnf_b = Matrix(1, d);
    m.unemb = Matrix(cfg.vocab_size, d);
    m.unemb.fill_normal(rng, kUnembStd);
    // The two verdict rows read a dedicated pair of hidden channels with
    // opposite sign. Only the logit difference decides the route, and this
    // gives the (frozen) readout a clean axis that the trainable o-proj
    // adapters can write to, instead of burying the verdict among 258
    // overlapping random directions.
    if (cfg.vocab_size > Tokenizer::kFail && d >= 2) {
        for (int i = 0; i < d; ++i) {
            m.unemb.at(Tokenizer::kPass, i) = 0.0;
            m.unemb.at(Tokenizer::kFail, i) = 0.0;
        }
        m.unemb.at(Tokenizer::kPass, d - 2) = kVerdictReadout;
        m.unemb.at(Tokenizer::kPass, d - 1) = kVerdictReadout;
        m.unemb.at(Tokenizer::kFail, d - 2) = -kVerdictReadout;
        m.unemb.at(Tokenizer::kFail, d - 1) = -kVerdictReadout;
    }

    m.adapters.resize(cfg.n_layers);
    for (auto& al : m.adapters) {
        auto init = [&](LoraAdapter& ad) {
            ad.rank = cfg.lora_rank;
            ad.alpha = cfg.lora_alpha;
            ad.B = Matrix(d, cfg.lora_rank);  // zeros
            ad.A = Matrix(cfg.lora_rank, d);
            // B = 0 keeps the initial adapter an exact no-op; A gets a
            // spread of random directions to seed the first updates.
            ad.A.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(cfg.lora_rank)));
        };
        init(al.q);
        init(al.k);
        init(al.v);
        init(al.o);
    }
    return m;
}

Matrix merge_adapter(const Matrix& w0, const LoraAdapter& adapter) {
    if (adapter.B.cols != adapter.rank || adapter.A.rows != adapter.rank ||
        adapter.B.rows != w0.rows || adapter.A.cols != w0.cols)
        throw std::invalid_argument("merge_adapter: shape mismatch");
    Matrix delta = matmul(adapter.B, adapter.A);
    const double s = adapter.scale();
    Matrix out = w0;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += s * delta.data[i];
    return out;
}

CriticModel merge_all_adapters(const CriticModel& m) {
    CriticModel out = m;
    for (size_t l = 0; l < m.adapters.size(); ++l) {
        out.layers[l].wq = merge_adapter(m.layers[l].wq, m.adapters[l].q);
        out.layers[l].wk = merge_adapter(m.layers[l].wk, m.adapters[l].k);
        out.layers[l].wv = merge_adapter(m.layers[l].wv, m.adapters[l].v);
        out.layers[l].wo = merge_adapter(m.layers[l].wo, m.adapters[l].o);
    }
    for (auto& al : out.adapters)
        for (auto* ad : {&al.q, &al.k, &al.v, &al.o}) ad->B.fill(0.0);
    return out;
}

PrefillResult forward_prefill(const CriticModel& m, std::span<const TokenId> tokens,
                              ForwardCache* cache) {
    const int L = static_cast<int>(tokens.size());
    if (L == 0) throw std::invalid_argument("forward_prefill: empty input");
    if (L > m.cfg.max_ctx) throw SequenceTooLongError(L, m.cfg.max_ctx);

    // Callers that don't keep a cache (the routing hot path) reuse one per
    // thread; reallocating the attention buffers per query costs more than
    // the forward pass itself.
    thread_local ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    const ModelView view = make_view(m);
    PrefillResult res;
    forward_internal(m, view, tokens, c, res.logits, /*final_only=*/true);
    res.tokens_processed = L;
    return res;
}

double loss_and_grad(const CriticModel& m, std::span<const TokenId> tokens, TokenId label,
                     AdapterGrads& grads, ForwardCache& c) {
    const ModelConfig& cfg = m.cfg;
    if (label < 0 || label >= cfg.vocab_size)
        throw std::out_of_range("loss_and_grad: label out of range");
    const int L = static_cast<int>(tokens.size());
    if (L == 0) throw std::invalid_argument("loss_and_grad: empty input");
    if (L > cfg.max_ctx) throw SequenceTooLongError(L, cfg.max_ctx);

    const ModelView view = make_view(m);
    std::vector<double> logits;
    forward_internal(m, view, tokens, c, logits);

    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int r = cfg.lora_rank;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    double mx = -1e300;
    for (double z : logits) mx = std::max(mx, z);
    double zsum = 0.0;
    for (double z : logits) zsum += std::exp(z - mx);
    const double log_z = mx + std::log(zsum);
    const double loss = log_z - logits[label];

    std::vector<double> dz(cfg.vocab_size);
    for (int v = 0; v < cfg.vocab_size; ++v) dz[v] = std::exp(logits[v] - log_z);
    dz[label] -= 1.0;

    std::vector<double> d_hf(d, 0.0);
    matvec_transpose_acc(m.unemb, dz.data(), d_hf.data());
    std::vector<double> dH(static_cast<size_t>(L) * d, 0.0);
    layer_norm_backward_row(d_hf.data(), c.lnf_xhat.data(), c.lnf_rstd, d, m.lnf_g.data.data(),
                            &dH[static_cast<size_t>(L - 1) * d]);

    const size_t Ld = static_cast<size_t>(L) * d;
    const size_t Lr = static_cast<size_t>(L) * r;
    const size_t Lf = static_cast<size_t>(L) * cfg.d_ff;
    std::vector<double> d_xln(Ld), dq(Ld), dk(Ld), dv_(Ld), dctx(Ld), btdy(Lr);
    std::vector<double> dact(Lf), du1(Lf);
    std::vector<double> vhT(static_cast<size_t>(hd) * L);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerWeights& lw = m.layers[l];
        const AttnLora& al = m.adapters[l];
        auto& lc = c.layer[l];
        auto& gl = grads.layers[l];

        // FFN backward; dH becomes the gradient w.r.t. h_mid in place.
        std::fill(dact.begin(), dact.end(), 0.0);
        gemm_acc(L, d, cfg.d_ff, dH.data(), lw.w2.data.data(), dact.data());
        for (size_t i = 0; i < du1.size(); ++i) du1[i] = dact[i] * gelu_grad(lc.u1[i]);
        std::fill(d_xln.begin(), d_xln.end(), 0.0);
        gemm_acc(L, cfg.d_ff, d, du1.data(), lw.w1.data.data(), d_xln.data());
        for (int t = 0; t < L; ++t) {
            const size_t td = static_cast<size_t>(t) * d;
            layer_norm_backward_row(&d_xln[td], &lc.xhat2[td], lc.rstd2[t], d,
                                    lw.ln2_g.data.data(), &dH[td]);
        }

        // Output projection: y = ctx W_o^T + s (ctx A_o^T) B_o^T.
        const double so = al.o.scale();
        std::fill(dctx.begin(), dctx.end(), 0.0);
        gemm_acc(L, d, d, dH.data(), lw.wo.data.data(), dctx.data());
        std::fill(btdy.begin(), btdy.end(), 0.0);
        gemm_acc(L, d, r, dH.data(), al.o.B.data.data(), btdy.data());
        gemm_acc(L, r, d, btdy.data(), al.o.A.data.data(), dctx.data(), so);
        gemm_atb_acc(L, d, r, so, dH.data(), lc.ao.data(), gl.o.gB.data.data());
        gemm_atb_acc(L, r, d, so, btdy.data(), lc.ctx.data(), gl.o.gA.data.data());

        // Attention backward.
        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv_.begin(), dv_.end(), 0.0);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int off = h * hd;
            double* P = &lc.probs[static_cast<size_t>(h) * L * L];
            for (int u = 0; u < L; ++u) {
                const double* vu = &lc.v[static_cast<size_t>(u) * d + off];
                for (int i = 0; i < hd; ++i) vhT[static_cast<size_t>(i) * L + u] = vu[i];
            }
            for (int t = 0; t < L; ++t) {
                double* prow = P + static_cast<size_t>(t) * L;
                const double* dct = &dctx[static_cast<size_t>(t) * d + off];
                // dP row via v^T, vectorized over u.
                std::vector<double> dprow(static_cast<size_t>(t) + 1, 0.0);
                for (int i = 0; i < hd; ++i) {
                    const double dcv = dct[i];
                    const double* vrow = &vhT[static_cast<size_t>(i) * L];
                    for (int u = 0; u <= t; ++u) dprow[u] += dcv * vrow[u];
                }
                double dot_p_dp = 0.0;
                for (int u = 0; u <= t; ++u) dot_p_dp += prow[u] * dprow[u];
                // dV accumulation and softmax backward into scores.
                const double* qt = &lc.q[static_cast<size_t>(t) * d + off];
                double* dqt = &dq[static_cast<size_t>(t) * d + off];
                for (int u = 0; u <= t; ++u) {
                    const double p = prow[u];
                    double* dvu = &dv_[static_cast<size_t>(u) * d + off];
                    for (int i = 0; i < hd; ++i) dvu[i] += p * dct[i];
                    const double ds = p * (dprow[u] - dot_p_dp) * inv_sqrt_hd;
                    if (ds == 0.0) continue;
                    const double* ku = &lc.k[static_cast<size_t>(u) * d + off];
                    double* dku = &dk[static_cast<size_t>(u) * d + off];
                    for (int i = 0; i < hd; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
        }

        // Q/K/V projection backward, then LN1 into the residual stream.
        std::fill(d_xln.begin(), d_xln.end(), 0.0);
        auto site_backward = [&](const Matrix& w, const LoraAdapter& ad, const double* dY,
                                 const double* AX, Matrix& gB, Matrix& gA) {
            const double s = ad.scale();
            gemm_acc(L, d, d, dY, w.data.data(), d_xln.data());
            std::fill(btdy.begin(), btdy.end(), 0.0);
            gemm_acc(L, d, r, dY, ad.B.data.data(), btdy.data());
            gemm_acc(L, r, d, btdy.data(), ad.A.data.data(), d_xln.data(), s);
            gemm_atb_acc(L, d, r, s, dY, AX, gB.data.data());
            gemm_atb_acc(L, r, d, s, btdy.data(), lc.x_ln1.data(), gA.data.data());
        };
        site_backward(lw.wq, al.q, dq.data(), lc.aq.data(), gl.q.gB, gl.q.gA);
        site_backward(lw.wk, al.k, dk.data(), lc.ak.data(), gl.k.gB, gl.k.gA);
        site_backward(lw.wv, al.v, dv_.data(), lc.av.data(), gl.v.gB, gl.v.gA);
        for (int t = 0; t < L; ++t) {
            const size_t td = static_cast<size_t>(t) * d;
            layer_norm_backward_row(&d_xln[td], &lc.xhat1[td], lc.rstd1[t], d,
                                    lw.ln1_g.data.data(), &dH[td]);
        }
    }
    return loss;
}

std::vector<Matrix*> adapter_param_ptrs(CriticModel& m) {
    std::vector<Matrix*> out;
    for (auto& al : m.adapters)
        for (auto* ad : {&al.q, &al.k, &al.v, &al.o}) {
            out.push_back(&ad->B);
            out.push_back(&ad->A);
        }
    return out;
}

std::vector<const Matrix*> adapter_param_ptrs(const CriticModel& m) {
    std::vector<const Matrix*> out;
    for (auto& al : m.adapters)
        for (auto* ad : {&al.q, &al.k, &al.v, &al.o}) {
            out.push_back(&ad->B);
            out.push_back(&ad->A);
        }
    return out;
}

std::vector<Matrix*> grad_ptrs(AdapterGrads& g) {
    std::vector<Matrix*> out;
    for (auto& l : g.layers)
        for (auto* s : {&l.q, &l.k, &l.v, &l.o}) {
            out.push_back(&s->gB);
            out.push_back(&s->gA);
        }
    return out;
}

}  // namespace criticgate
