#include "xrc/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "xrc/io.hpp"

namespace xrc {

void ModelConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (vocab_size <= Vocabulary::kUnk) fail("vocab_size must exceed the reserved ids");
    if (d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0) fail("dimensions must be positive");
    if (d_model % n_heads != 0) fail("d_model must equal n_heads x d_k");
    if (n_options < 2) fail("n_options must be at least 2");
    if (max_len == 0 || max_len > kMaxSequenceLength) fail("max_len must be in [1, 512]");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    if (!(init_scale > 0.0) || !std::isfinite(init_scale)) fail("init_scale must be positive");
}

// ---- vocabulary ---------------------------------------------------------------

Vocabulary::Vocabulary() : tokens_{"[PAD]", "[CLS]", "[SEP]", "[UNK]"} {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = i;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> extra) {
    Vocabulary v;
    for (auto& t : extra)
        if (std::find(v.tokens_.begin(), v.tokens_.end(), t) == v.tokens_.end()) v.tokens_.push_back(std::move(t));
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = i;
    return v;
}

Vocabulary Vocabulary::build(const std::vector<Instance>& instances) {
    std::set<std::string> seen;
    for (const auto& inst : instances) {
        seen.insert(inst.passage.begin(), inst.passage.end());
        seen.insert(inst.question.begin(), inst.question.end());
        for (const auto& opt : inst.options) seen.insert(opt.begin(), opt.end());
    }
    return from_tokens(std::vector<std::string>(seen.begin(), seen.end()));
}

std::size_t Vocabulary::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
    if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id) + " out of vocabulary");
    return tokens_[id];
}

// ---- encoding -------------------------------------------------------------------

Encoded encode(const Instance& inst, const Vocabulary& vocab, std::size_t max_len) {
    if (inst.question.empty() && inst.passage.empty()) throw std::invalid_argument("encode: instance has no tokens");
    Encoded e;
    auto push = [&](std::size_t id) {
        e.ids.push_back(id);
        e.tokens.push_back(vocab.token(id));
    };
    auto push_word = [&](const std::string& w) {
        e.ids.push_back(vocab.id(w));
        e.tokens.push_back(w);
    };
    push(Vocabulary::kCls);
    for (const auto& w : inst.question) push_word(w);
    for (const auto& opt : inst.options) {
        push(Vocabulary::kSep);
        for (const auto& w : opt) push_word(w);
    }
    push(Vocabulary::kSep);
    if (e.ids.size() + 1 > max_len)
        throw std::invalid_argument("encode: question segment of " + std::to_string(e.ids.size() + 1) +
                                    " tokens exceeds max_len " + std::to_string(max_len));
    const std::size_t room = max_len - e.ids.size() - 1;
    const std::size_t kept = std::min(room, inst.passage.size());
    e.passage_begin = e.ids.size();
    for (std::size_t i = 0; i < kept; ++i) push_word(inst.passage[i]);
    e.passage_end = e.ids.size();
    push(Vocabulary::kSep);
    e.n_valid = e.ids.size();
    while (e.ids.size() < max_len) push(Vocabulary::kPad);
    return e;
}

Matrix attention_mask(const Encoded& enc, bool causal) {
    const std::size_t n = enc.ids.size();
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (j >= enc.n_valid || (causal && j > i)) m(i, j) = kMaskValue;
    return m;
}

// ---- parameters ----------------------------------------------------------------------

std::vector<Tensor> ModelParams::all() const {
    std::vector<Tensor> out{tok_emb, pos_emb};
    for (const auto& l : layers)
        out.insert(out.end(), {l.wq, l.wk, l.wv, l.wo, l.bo, l.ln1_gain, l.ln1_shift, l.w1, l.b1, l.w2, l.b2,
                               l.ln2_gain, l.ln2_shift});
    out.insert(out.end(), {ans_w, ans_b, grp_w, grp_b});
    return out;
}

std::vector<Tensor> ModelParams::encoder_and_answer() const {
    auto v = all();
    v.resize(v.size() - 2);
    return v;
}

namespace {

Tensor copy_param(const Tensor& t) { return Tensor::parameter(t.shape(), t.value(), t.name()); }

}  // namespace

ModelParams ModelParams::clone() const {
    ModelParams p;
    p.tok_emb = copy_param(tok_emb);
    p.pos_emb = copy_param(pos_emb);
    for (const auto& l : layers) {
        p.layers.push_back({copy_param(l.wq), copy_param(l.wk), copy_param(l.wv), copy_param(l.wo), copy_param(l.bo),
                            copy_param(l.ln1_gain), copy_param(l.ln1_shift), copy_param(l.w1), copy_param(l.b1),
                            copy_param(l.w2), copy_param(l.b2), copy_param(l.ln2_gain), copy_param(l.ln2_shift)});
    }
    p.ans_w = copy_param(ans_w);
    p.ans_b = copy_param(ans_b);
    p.grp_w = copy_param(grp_w);
    p.grp_b = copy_param(grp_b);
    return p;
}

ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    RandomStream rng(cfg.seed, 0x1A17);
    auto weight = [&](std::size_t r, std::size_t c, std::string name) {
        std::vector<double> v(r * c);
        for (double& x : v) x = rng.uniform(-cfg.init_scale, cfg.init_scale);
        return Tensor::parameter({r, c}, std::move(v), std::move(name));
    };
    auto fill = [](std::size_t c, double value, std::string name) {
        return Tensor::parameter({1, c}, std::vector<double>(c, value), std::move(name));
    };
    const std::size_t d = cfg.d_model;
    ModelParams p;
    p.tok_emb = weight(cfg.vocab_size, d, "tok_emb");
    p.pos_emb = weight(cfg.max_len, d, "pos_emb");
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        LayerParams lp;
        lp.wq = weight(d, d, pre + "wq");
        lp.wk = weight(d, d, pre + "wk");
        lp.wv = weight(d, d, pre + "wv");
        lp.wo = weight(d, d, pre + "wo");
        lp.bo = fill(d, 0.0, pre + "bo");
        lp.ln1_gain = fill(d, 1.0, pre + "ln1_gain");
        lp.ln1_shift = fill(d, 0.0, pre + "ln1_shift");
        lp.w1 = weight(d, cfg.d_ff, pre + "w1");
        lp.b1 = fill(cfg.d_ff, 0.0, pre + "b1");
        lp.w2 = weight(cfg.d_ff, d, pre + "w2");
        lp.b2 = fill(d, 0.0, pre + "b2");
        lp.ln2_gain = fill(d, 1.0, pre + "ln2_gain");
        lp.ln2_shift = fill(d, 0.0, pre + "ln2_shift");
        p.layers.push_back(std::move(lp));
    }
    p.ans_w = weight(d, cfg.n_options, "ans_w");
    p.ans_b = fill(cfg.n_options, 0.0, "ans_b");
    p.grp_w = weight(d, 2, "grp_w");
    p.grp_b = fill(2, 0.0, "grp_b");
    return p;
}

// ---- forward ----------------------------------------------------------------------------

AttentionLayerOutput attention_layer(const Tensor& x, const LayerParams& p, const Tensor& mask, std::size_t n_heads,
                                     const std::vector<Matrix>* override_heads) {
    const std::size_t d = x.cols();
    const std::size_t dk = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor q = matmul(x, p.wq);
    Tensor k = matmul(x, p.wk);
    Tensor v = matmul(x, p.wv);
    AttentionLayerOutput out;
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = slice_cols(q, h * dk, (h + 1) * dk);
        Tensor kh = slice_cols(k, h * dk, (h + 1) * dk);
        Tensor vh = slice_cols(v, h * dk, (h + 1) * dk);
        Tensor a;
        if (override_heads && !(*override_heads)[h].data.empty()) {
            a = Tensor::constant((*override_heads)[h]);
        } else {
            a = softmax_rows(scale(matmul_bt(qh, kh), inv_sqrt), mask);
            if (a.requires_grad()) a.retain_grad();
        }
        heads.push_back(matmul(a, vh));
        out.attention.push_back(a);
    }
    Tensor proj = add_row_bias(matmul(concat_cols(heads), p.wo), p.bo);
    out.output = layer_norm_rows(add(x, proj), p.ln1_gain, p.ln1_shift);
    return out;
}

namespace {

Tensor maybe_dropout(const Tensor& x, double rate, RandomStream* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    std::vector<double> f(x.size());
    const double keep = 1.0 / (1.0 - rate);
    for (double& v : f) v = rng->uniform() < rate ? 0.0 : keep;
    return mul_constant(x, f);
}

}  // namespace

ModelOutput forward(const ModelConfig& cfg, const ModelParams& params, const Encoded& enc,
                    const ForwardOptions& opts) {
    const std::size_t n = enc.ids.size();
    if (n == 0 || n > cfg.max_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(n) + " outside [1, max_len]");
    for (std::size_t i = 0; i < n; ++i)
        if (enc.ids[i] >= cfg.vocab_size)
            throw std::out_of_range("forward: token id " + std::to_string(enc.ids[i]) + " at position " +
                                    std::to_string(i) + " outside vocabulary of " + std::to_string(cfg.vocab_size));

    ModelOutput out;
    const Tensor mask = Tensor::constant(attention_mask(enc, cfg.causal));
    Tensor x = add(gather_rows(params.tok_emb, enc.ids), head_rows(params.pos_emb, n));
    if (opts.embedding_offset) {
        x = add(x, Tensor::constant(*opts.embedding_offset));
    }
    if (x.requires_grad()) x.retain_grad();
    out.embeddings = x;

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = params.layers[l];
        const std::vector<Matrix>* ov =
            opts.attention_override && !(*opts.attention_override)[l].empty() ? &(*opts.attention_override)[l] : nullptr;
        auto att = attention_layer(x, lp, mask, cfg.n_heads, ov);
        out.attention.push_back(std::move(att.attention));
        x = att.output;
        Tensor ff = relu(add_row_bias(matmul(x, lp.w1), lp.b1));
        ff = add_row_bias(matmul(ff, lp.w2), lp.b2);
        ff = maybe_dropout(ff, cfg.dropout, opts.dropout_rng);
        x = layer_norm_rows(add(x, ff), lp.ln2_gain, lp.ln2_shift);
    }
    out.pooled = select_row(x, 0);
    out.answer_logits = add_row_bias(matmul(out.pooled, params.ans_w), params.ans_b);
    const Tensor probe_in = opts.detach_probe ? out.pooled.detach() : out.pooled;
    out.group_logits = add_row_bias(matmul(probe_in, params.grp_w), params.grp_b);
    return out;
}

std::size_t argmax(const std::vector<double>& values) {
    return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t predict(const Model& model, const Instance& inst) {
    auto enc = encode(inst, model.vocab, model.config.max_len);
    return argmax(forward(model.config, model.params, enc).answer_logits.value());
}

// ---- checkpoints ------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'X', 'R', 'C', 'C', 'K', 'P', 'T', '\0'};

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    std::vector<unsigned char> take() { return std::move(out_); }

private:
    std::vector<unsigned char> out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& b) : b_(b) {}
    void need(std::size_t n, const char* what) {
        if (pos_ + n > b_.size())
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  std::string("checkpoint truncated while reading ") + what);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return b_[pos_++];
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(const char* what) {
        const auto n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == b_.size(); }

private:
    const std::vector<unsigned char>& b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const Model& model) {
    const auto& c = model.config;
    ByteWriter w;
    w.raw(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    for (auto v : {c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.n_options, c.max_len}) w.u64(v);
    w.f64(c.dropout);
    w.u64(c.seed);
    w.u8(c.causal ? 1 : 0);
    w.f64(c.init_scale);
    w.u64(model.vocab.size());
    for (const auto& t : model.vocab.tokens()) w.str(t);
    const auto params = model.params.all();
    w.u64(params.size());
    for (const auto& p : params) {
        w.str(p.name());
        w.u64(p.rows());
        w.u64(p.cols());
        for (double v : p.value()) w.f64(v);
    }
    return w.take();
}

Model deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
    using K = CheckpointError::Kind;
    ByteReader r(bytes);
    r.need(sizeof kMagic, "magic");
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw CheckpointError(K::BadMagic, "not a checkpoint file");
    for (std::size_t i = 0; i < sizeof kMagic; ++i) r.u8("magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(K::Version, "checkpoint format version " + std::to_string(version) + ", expected " +
                                              std::to_string(kCheckpointVersion));
    Model m;
    auto& c = m.config;
    c.vocab_size = r.u64("config");
    c.d_model = r.u64("config");
    c.n_heads = r.u64("config");
    c.n_layers = r.u64("config");
    c.d_ff = r.u64("config");
    c.n_options = r.u64("config");
    c.max_len = r.u64("config");
    c.dropout = r.f64("config");
    c.seed = r.u64("config");
    c.causal = r.u8("config") != 0;
    c.init_scale = r.f64("config");
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(K::InvalidConfig, e.what());
    }
    const auto n_tokens = r.u64("vocabulary");
    if (n_tokens != c.vocab_size)
        throw CheckpointError(K::ShapeMismatch, "vocabulary has " + std::to_string(n_tokens) + " tokens, config says " +
                                                    std::to_string(c.vocab_size));
    std::vector<std::string> toks;
    for (std::uint64_t i = 0; i < n_tokens; ++i) toks.push_back(r.str("vocabulary"));
    m.vocab = Vocabulary::from_tokens(std::vector<std::string>(toks.begin() + 4, toks.end()));
    if (m.vocab.tokens() != toks) throw CheckpointError(K::Malformed, "vocabulary reserved ids are corrupt");

    // The config determines the expected layout; stored arrays must match it exactly.
    m.params = init_params(c);
    auto expected = m.params.all();
    const auto n_params = r.u64("parameter count");
    if (n_params != expected.size())
        throw CheckpointError(K::ShapeMismatch, "checkpoint holds " + std::to_string(n_params) +
                                                    " parameter arrays, config implies " +
                                                    std::to_string(expected.size()));
    for (auto& p : expected) {
        const auto name = r.str("parameter name");
        const auto rows = r.u64("parameter shape");
        const auto cols = r.u64("parameter shape");
        if (name != p.name() || rows != p.rows() || cols != p.cols())
            throw CheckpointError(K::ShapeMismatch, "parameter '" + name + "' has shape " + std::to_string(rows) + "x" +
                                                        std::to_string(cols) + ", expected '" + p.name() + "' " +
                                                        std::to_string(p.rows()) + "x" + std::to_string(p.cols()));
        for (double& v : p.mutable_value()) v = r.f64("parameter values");
    }
    if (!r.at_end()) throw CheckpointError(K::Malformed, "trailing bytes after parameter arrays");
    return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(model);
    try {
        write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Io, e.what());
    }
}

Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace xrc
