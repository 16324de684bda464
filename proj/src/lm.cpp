#include "fedtok/lm.hpp"

#include <cmath>
#include <stdexcept>

namespace fedtok {

namespace {

inline Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& x) {
    return 1.0 / (1.0 + (-x).exp());
}

}  // namespace

void LmConfig::validate() const {
    if (vocab_size == 0 || embed_dim == 0 || hidden_dim == 0 || num_layers == 0 ||
        max_seq_len < 2) {
        throw std::invalid_argument("LmConfig: all dimensions must be positive "
                                    "and max_seq_len at least 2");
    }
}

LmParams::LmParams(const LmConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const size_t V = cfg_.vocab_size, D = cfg_.embed_dim, H = cfg_.hidden_dim;
    offsets_.push_back(0);                     // embedding
    size_t off = V * D;
    for (size_t l = 0; l < cfg_.num_layers; ++l) {
        const size_t in = layer_in_dim(l);
        offsets_.push_back(off);               // w_input
        off += 4 * H * in;
        offsets_.push_back(off);               // w_recur
        off += 4 * H * H;
        offsets_.push_back(off);               // bias
        off += 4 * H;
    }
    offsets_.push_back(off);                   // proj
    off += D * H;
    offsets_.push_back(off);                   // output_bias
    off += V;
    values_.assign(off, 0.0);
}

size_t LmParams::layer_in_dim(size_t layer) const {
    return layer == 0 ? cfg_.embed_dim : cfg_.hidden_dim;
}

size_t LmParams::param_count(const LmConfig& cfg) {
    return LmParams(cfg).size();
}

Eigen::Map<MatrixRM> LmParams::embedding() {
    return {values_.data() + offsets_[0], static_cast<Eigen::Index>(cfg_.vocab_size),
            static_cast<Eigen::Index>(cfg_.embed_dim)};
}
Eigen::Map<const MatrixRM> LmParams::embedding() const {
    return {values_.data() + offsets_[0], static_cast<Eigen::Index>(cfg_.vocab_size),
            static_cast<Eigen::Index>(cfg_.embed_dim)};
}
Eigen::Map<MatrixRM> LmParams::w_input(size_t layer) {
    return {values_.data() + offsets_[1 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim),
            static_cast<Eigen::Index>(layer_in_dim(layer))};
}
Eigen::Map<const MatrixRM> LmParams::w_input(size_t layer) const {
    return {values_.data() + offsets_[1 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim),
            static_cast<Eigen::Index>(layer_in_dim(layer))};
}
Eigen::Map<MatrixRM> LmParams::w_recur(size_t layer) {
    return {values_.data() + offsets_[2 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim),
            static_cast<Eigen::Index>(cfg_.hidden_dim)};
}
Eigen::Map<const MatrixRM> LmParams::w_recur(size_t layer) const {
    return {values_.data() + offsets_[2 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim),
            static_cast<Eigen::Index>(cfg_.hidden_dim)};
}
Eigen::Map<Eigen::VectorXd> LmParams::bias(size_t layer) {
    return {values_.data() + offsets_[3 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim)};
}
Eigen::Map<const Eigen::VectorXd> LmParams::bias(size_t layer) const {
    return {values_.data() + offsets_[3 + 3 * layer],
            static_cast<Eigen::Index>(4 * cfg_.hidden_dim)};
}
Eigen::Map<MatrixRM> LmParams::proj() {
    return {values_.data() + offsets_[1 + 3 * cfg_.num_layers],
            static_cast<Eigen::Index>(cfg_.embed_dim),
            static_cast<Eigen::Index>(cfg_.hidden_dim)};
}
Eigen::Map<const MatrixRM> LmParams::proj() const {
    return {values_.data() + offsets_[1 + 3 * cfg_.num_layers],
            static_cast<Eigen::Index>(cfg_.embed_dim),
            static_cast<Eigen::Index>(cfg_.hidden_dim)};
}
Eigen::Map<Eigen::VectorXd> LmParams::output_bias() {
    return {values_.data() + offsets_[2 + 3 * cfg_.num_layers],
            static_cast<Eigen::Index>(cfg_.vocab_size)};
}
Eigen::Map<const Eigen::VectorXd> LmParams::output_bias() const {
    return {values_.data() + offsets_[2 + 3 * cfg_.num_layers],
            static_cast<Eigen::Index>(cfg_.vocab_size)};
}

void GradientVector::recompute_norm() {
    double sq = 0.0;
    for (double v : values) sq += v * v;
    norm = std::sqrt(sq);
}

LmParams init_params(const LmConfig& cfg, uint64_t seed) {
    LmParams params(cfg);
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
    for (double& v : params.values()) {
        v = (2.0 * rng.uniform01() - 1.0) * bound;
    }
    params.output_bias().setZero();
    return params;
}

namespace {

// Per-layer activations for one teacher-forced sequence (steps = len - 1).
struct LayerActs {
    MatrixRM gate_i, gate_f, gate_g, gate_o;  // steps × H, post-activation
    MatrixRM cell, tanh_cell, hidden;         // steps × H
};

struct SeqActs {
    std::vector<LayerActs> layers;
    MatrixRM pmat;   // steps × D: proj · h_top per step
    MatrixRM probs;  // steps × V: softmax rows
    ForwardResult result;
};

void check_sequence(const LmParams& params, const std::vector<TokenId>& ids) {
    const LmConfig& cfg = params.config();
    if (ids.size() < 2) {
        throw std::invalid_argument("forward_nll: sequence needs at least 2 tokens");
    }
    // max_seq_len bounds training-time encoding (encode_for_lm truncates);
    // the forward pass itself is length-agnostic so evaluation can score
    // full sentences.
    for (TokenId id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= cfg.vocab_size) {
            throw std::out_of_range("forward_nll: token id outside vocab");
        }
    }
}

SeqActs run_forward(const LmParams& params, const std::vector<TokenId>& ids) {
    check_sequence(params, ids);
    const LmConfig& cfg = params.config();
    const size_t H = cfg.hidden_dim;
    const size_t steps = ids.size() - 1;

    SeqActs acts;
    acts.layers.resize(cfg.num_layers);

    // Inputs to layer 0: embedding rows of t_1..t_{n-1}.
    MatrixRM input(steps, cfg.embed_dim);
    const auto emb = params.embedding();
    for (size_t t = 0; t < steps; ++t) {
        input.row(t) = emb.row(ids[t]);
    }

    for (size_t l = 0; l < cfg.num_layers; ++l) {
        LayerActs& la = acts.layers[l];
        la.gate_i.resize(steps, H);
        la.gate_f.resize(steps, H);
        la.gate_g.resize(steps, H);
        la.gate_o.resize(steps, H);
        la.cell.resize(steps, H);
        la.tanh_cell.resize(steps, H);
        la.hidden.resize(steps, H);

        // Input-to-hidden part of the pre-activations for every step at once.
        MatrixRM zx = input * params.w_input(l).transpose();
        zx.rowwise() += params.bias(l).transpose();

        const auto wh = params.w_recur(l);
        Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(H);
        Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(H);
        for (size_t t = 0; t < steps; ++t) {
            Eigen::VectorXd z = zx.row(t).transpose() + wh * h_prev;
            const auto i = sigmoid(z.head(H).array());
            const auto f = sigmoid(z.segment(H, H).array());
            const auto g = z.segment(2 * H, H).array().tanh();
            const auto o = sigmoid(z.tail(H).array());
            const Eigen::ArrayXd c = f * c_prev.array() + i * g;
            const Eigen::ArrayXd tc = c.tanh();
            la.gate_i.row(t) = i.matrix().transpose();
            la.gate_f.row(t) = f.matrix().transpose();
            la.gate_g.row(t) = g.matrix().transpose();
            la.gate_o.row(t) = o.matrix().transpose();
            la.cell.row(t) = c.matrix().transpose();
            la.tanh_cell.row(t) = tc.matrix().transpose();
            la.hidden.row(t) = (o * tc).matrix().transpose();
            h_prev = la.hidden.row(t).transpose();
            c_prev = c.matrix();
        }
        input = la.hidden;  // feeds the next layer
    }

    // Tied output head for all steps at once.
    const MatrixRM& h_top = acts.layers.back().hidden;
    acts.pmat = h_top * params.proj().transpose();                  // steps × D
    MatrixRM logits = acts.pmat * emb.transpose();                  // steps × V
    logits.rowwise() += params.output_bias().transpose();

    acts.probs.resize(steps, cfg.vocab_size);
    acts.result.position_nll.resize(steps);
    acts.result.argmax.resize(steps);
    double total = 0.0;
    for (size_t t = 0; t < steps; ++t) {
        Eigen::Index arg = 0;
        const double mx = logits.row(t).maxCoeff(&arg);
        const Eigen::ArrayXd shifted = logits.row(t).transpose().array() - mx;
        const Eigen::ArrayXd ex = shifted.exp();
        const double z = ex.sum();
        acts.probs.row(t) = (ex / z).matrix().transpose();
        const double nll_t = std::log(z) - shifted(ids[t + 1]);
        acts.result.position_nll[t] = nll_t;
        acts.result.argmax[t] = static_cast<TokenId>(arg);
        total += nll_t;
    }
    acts.result.nll = total;
    return acts;
}

}  // namespace

ForwardResult forward_nll(const LmParams& params, const std::vector<TokenId>& ids) {
    return run_forward(params, ids).result;
}

GradientVector backward(const LmParams& params,
                        const std::vector<std::vector<TokenId>>& batch) {
    if (batch.empty()) throw std::invalid_argument("backward: empty batch");
    const LmConfig& cfg = params.config();
    const size_t H = cfg.hidden_dim;

    LmParams grad(cfg);  // zero-initialized, same layout
    const auto emb = params.embedding();

    for (const std::vector<TokenId>& ids : batch) {
        SeqActs acts = run_forward(params, ids);
        const size_t steps = ids.size() - 1;

        // Output head: dlogits = probs - onehot(target).
        MatrixRM dlogits = std::move(acts.probs);
        for (size_t t = 0; t < steps; ++t) {
            dlogits(t, ids[t + 1]) -= 1.0;
        }
        grad.output_bias() += dlogits.colwise().sum().transpose();
        grad.embedding() += dlogits.transpose() * acts.pmat;
        const MatrixRM dp = dlogits * emb;  // steps × D
        grad.proj() += dp.transpose() * acts.layers.back().hidden;
        MatrixRM dh_in = dp * params.proj();  // steps × H, flows into top layer

        for (size_t li = cfg.num_layers; li-- > 0;) {
            const LayerActs& la = acts.layers[li];
            const auto wh = params.w_recur(li);
            MatrixRM dz(steps, 4 * H);
            Eigen::VectorXd dh_carry = Eigen::VectorXd::Zero(H);
            Eigen::ArrayXd dc = Eigen::ArrayXd::Zero(H);
            for (size_t t = steps; t-- > 0;) {
                const Eigen::ArrayXd dh =
                    (dh_in.row(t).transpose() + dh_carry).array();
                const Eigen::ArrayXd i = la.gate_i.row(t).transpose().array();
                const Eigen::ArrayXd f = la.gate_f.row(t).transpose().array();
                const Eigen::ArrayXd g = la.gate_g.row(t).transpose().array();
                const Eigen::ArrayXd o = la.gate_o.row(t).transpose().array();
                const Eigen::ArrayXd tc = la.tanh_cell.row(t).transpose().array();
                const Eigen::ArrayXd c_prev =
                    t > 0 ? la.cell.row(t - 1).transpose().array().eval()
                          : Eigen::ArrayXd::Zero(H).eval();

                dc += dh * o * (1.0 - tc * tc);
                const Eigen::ArrayXd dzo = dh * tc * o * (1.0 - o);
                const Eigen::ArrayXd dzi = dc * g * i * (1.0 - i);
                const Eigen::ArrayXd dzf = dc * c_prev * f * (1.0 - f);
                const Eigen::ArrayXd dzg = dc * i * (1.0 - g * g);
                dz.row(t).segment(0, H) = dzi.matrix().transpose();
                dz.row(t).segment(H, H) = dzf.matrix().transpose();
                dz.row(t).segment(2 * H, H) = dzg.matrix().transpose();
                dz.row(t).segment(3 * H, H) = dzo.matrix().transpose();

                dh_carry = wh.transpose() * dz.row(t).transpose();
                dc *= f;
            }

            grad.bias(li) += dz.colwise().sum().transpose();
            if (steps > 1) {
                grad.w_recur(li) += dz.bottomRows(steps - 1).transpose() *
                                    la.hidden.topRows(steps - 1);
            }
            if (li > 0) {
                grad.w_input(li) +=
                    dz.transpose() * acts.layers[li - 1].hidden;
                dh_in = dz * params.w_input(li);
            } else {
                MatrixRM x0(steps, cfg.embed_dim);
                for (size_t t = 0; t < steps; ++t) x0.row(t) = emb.row(ids[t]);
                grad.w_input(0) += dz.transpose() * x0;
                const MatrixRM dx = dz * params.w_input(0);
                auto gemb = grad.embedding();
                for (size_t t = 0; t < steps; ++t) {
                    gemb.row(ids[t]) += dx.row(t);
                }
            }
        }
    }

    GradientVector out;
    out.values = std::move(grad.values());
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (double& v : out.values) v *= inv_b;
    out.recompute_norm();
    return out;
}

GradientVector local_train(const LmParams& params, const UserDataset& user,
                           const TokenizerModel& tok, const LocalTrainConfig& cfg,
                           uint64_t seed) {
    if (user.sentences.empty()) {
        throw std::invalid_argument("local_train: user has no sentences");
    }
    if (cfg.batch_size == 0) {
        throw std::invalid_argument("local_train: batch_size must be positive");
    }

    std::vector<std::vector<TokenId>> seqs;
    seqs.reserve(user.sentences.size());
    for (const std::string& sentence : user.sentences) {
        seqs.push_back(encode_for_lm(tok, params.config(), sentence));
    }

    LmParams local = params;
    Eigen::Map<Eigen::VectorXd> flat(local.values().data(),
                                     static_cast<Eigen::Index>(local.size()));
    Rng rng(seed);
    std::vector<size_t> order(seqs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::vector<TokenId>> batch;
            batch.reserve(end - start);
            for (size_t i = start; i < end; ++i) batch.push_back(seqs[order[i]]);
            const GradientVector g = backward(local, batch);
            flat -= cfg.lr * Eigen::Map<const Eigen::VectorXd>(
                                 g.values.data(),
                                 static_cast<Eigen::Index>(g.values.size()));
        }
    }

    GradientVector delta;
    delta.values.resize(local.size());
    for (size_t i = 0; i < delta.values.size(); ++i) {
        delta.values[i] = local.values()[i] - params.values()[i];
    }
    delta.recompute_norm();
    return delta;
}

LstmState initial_state(const LmConfig& cfg) {
    LstmState state;
    state.h.assign(cfg.num_layers, Eigen::VectorXd::Zero(cfg.hidden_dim));
    state.c.assign(cfg.num_layers, Eigen::VectorXd::Zero(cfg.hidden_dim));
    return state;
}

Eigen::VectorXd step_probs(const LmParams& params, LstmState& state, TokenId input) {
    const LmConfig& cfg = params.config();
    const size_t H = cfg.hidden_dim;
    if (input < 0 || static_cast<size_t>(input) >= cfg.vocab_size) {
        throw std::out_of_range("step_probs: token id outside vocab");
    }

    Eigen::VectorXd x = params.embedding().row(input).transpose();
    for (size_t l = 0; l < cfg.num_layers; ++l) {
        const Eigen::VectorXd z =
            params.w_input(l) * x + params.w_recur(l) * state.h[l] + params.bias(l);
        const auto i = sigmoid(z.head(H).array());
        const auto f = sigmoid(z.segment(H, H).array());
        const auto g = z.segment(2 * H, H).array().tanh();
        const auto o = sigmoid(z.tail(H).array());
        state.c[l] = (f * state.c[l].array() + i * g).matrix();
        state.h[l] = (o * state.c[l].array().tanh()).matrix();
        x = state.h[l];
    }

    Eigen::VectorXd logits =
        params.embedding() * (params.proj() * x) + params.output_bias();
    const double mx = logits.maxCoeff();
    Eigen::ArrayXd ex = (logits.array() - mx).exp();
    return (ex / ex.sum()).matrix();
}

TokenSeq sample_tokens(const LmParams& params, const std::vector<TokenId>& prefix,
                       size_t l_max, TokenId eos_id, Rng& rng) {
    if (prefix.empty()) {
        throw std::invalid_argument("sample_tokens: prefix must start with BOS");
    }
    if (l_max == 0) throw std::invalid_argument("sample_tokens: l_max must be >= 1");

    TokenSeq seq;
    seq.ids = prefix;
    LstmState state = initial_state(params.config());
    Eigen::VectorXd probs;
    for (TokenId id : prefix) probs = step_probs(params, state, id);

    std::vector<double> weights(probs.size());
    for (size_t generated = 0; generated < l_max; ++generated) {
        Eigen::VectorXd::Map(weights.data(), probs.size()) = probs;
        const TokenId next = static_cast<TokenId>(rng.pick_weighted(weights));
        if (next == eos_id) {
            seq.ids.push_back(eos_id);
            return seq;
        }
        seq.ids.push_back(next);
        probs = step_probs(params, state, next);
    }
    seq.ids.push_back(eos_id);  // hit the length cap
    return seq;
}

std::string sample_sentence(const LmParams& params, const TokenizerModel& tok,
                            size_t l_max, Rng& rng) {
    const TokenSeq seq =
        sample_tokens(params, {tok.bos_id()}, l_max, tok.eos_id(), rng);
    return tok.decode(seq);
}

std::vector<TokenId> encode_for_lm(const TokenizerModel& tok, const LmConfig& cfg,
                                   std::string_view sentence) {
    std::vector<TokenId> ids = tok.encode(sentence).ids;
    if (ids.size() > cfg.max_seq_len) {
        ids.resize(cfg.max_seq_len);
        ids.back() = tok.eos_id();
    }
    return ids;
}

}  // namespace fedtok
