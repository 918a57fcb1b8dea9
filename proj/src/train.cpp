#include "xrc/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "xrc/interpret.hpp"
#include "xrc/io.hpp"

namespace xrc {

using ordered_json = nlohmann::ordered_json;

void TrainConfig::validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("eta must be > 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    debias_cfg.validate();
}

void sgd_step(const std::vector<Tensor>& params, double eta) {
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i])) throw NonFiniteGradient(p.name(), i);
    }
    for (auto p : params) {
        if (!p.has_grad()) continue;
        auto& v = p.mutable_value();
        const auto& g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= eta * g[i];
    }
}

Batch make_batch(const std::vector<Instance>& instances, const std::vector<std::size_t>& indices,
                 const Vocabulary& vocab, std::size_t max_len) {
    Batch b;
    for (std::size_t i : indices) {
        const auto& inst = instances.at(i);
        b.inputs.push_back(encode(inst, vocab, max_len));
        b.answers.push_back(inst.answer);
        b.groups.push_back(inst.group);
    }
    return b;
}

namespace {

Tensor batch_mean(const std::vector<Tensor>& terms) { return mean(concat_cols(terms)); }

Tensor probe_logits(const ModelParams& params, const Tensor& pooled) {
    return add_row_bias(matmul(pooled.detach(), params.grp_w), params.grp_b);
}

}  // namespace

BatchLoss batch_loss(const ModelConfig& cfg, const ModelParams& params, const Batch& batch, const BatchOptions& opts) {
    const std::size_t n = batch.inputs.size();
    if (n == 0) throw std::invalid_argument("empty batch");
    BatchLoss r;

    ForwardOptions fo;
    fo.dropout_rng = opts.dropout_rng;
    std::vector<ModelOutput> clean;
    clean.reserve(n);
    for (const auto& enc : batch.inputs) clean.push_back(forward(cfg, params, enc, fo));

    std::vector<Tensor> ce;
    for (std::size_t i = 0; i < n; ++i) ce.push_back(cross_entropy(clean[i].answer_logits, batch.answers[i]));
    Tensor comp = batch_mean(ce);

    if (!opts.debias) {
        r.objective = r.total = comp;
        r.parts.comp = r.parts.total = comp.item();
        return r;
    }

    if (opts.fixed_offsets) {
        if (opts.fixed_offsets->size() != n) throw std::invalid_argument("offset count does not match batch");
        r.offsets = *opts.fixed_offsets;
    } else {
        std::vector<Tensor> lb;
        for (std::size_t i = 0; i < n; ++i) {
            lb.push_back(opts.source == PerturbSource::Probe
                             ? bias_loss(clean[i].group_logits, batch.groups[i])
                             : cross_entropy(clean[i].answer_logits, batch.answers[i]));
        }
        Tensor total_bias = sum(concat_cols(lb));
        backward(total_bias);
        for (std::size_t i = 0; i < n; ++i)
            r.offsets.push_back(
                perturbation_offset(clean[i].embeddings.grad_matrix(), opts.lambda, batch.inputs[i].n_valid));
        reset_graph(total_bias);
        for (auto p : params.all()) p.zero_grad();
    }

    std::vector<Tensor> p_clean, p_adv, probe_ce;
    for (std::size_t i = 0; i < n; ++i) {
        ForwardOptions adv_fo = fo;
        adv_fo.embedding_offset = &r.offsets[i];
        ModelOutput adv = forward(cfg, params, batch.inputs[i], adv_fo);
        p_clean.push_back(softmax_rows(clean[i].answer_logits));
        p_adv.push_back(softmax_rows(adv.answer_logits));
        probe_ce.push_back(bias_loss(probe_logits(params, clean[i].pooled), batch.groups[i]));
    }
    Tensor kl = mean_kl(p_clean, p_adv);
    FairnessPenalty fair = fairness_penalty(p_clean, batch.groups);
    CompositeLoss total = composite_loss(comp, kl, fair.value, opts.alpha, opts.beta);
    Tensor bias = batch_mean(probe_ce);

    r.total = total.total;
    r.probe = bias;
    r.objective = add(total.total, bias);
    r.parts = total.parts;
    r.parts.bias = bias.item();
    r.single_group = fair.single_group;
    return r;
}

EvalReport evaluate(const Model& model, const std::vector<Instance>& instances, const std::string& split,
                    const EvalOptions& opts) {
    if (instances.empty()) throw std::invalid_argument("cannot evaluate an empty split");
    EvalReport rep;
    rep.split = split;
    rep.n_instances = instances.size();
    Labels preds, refs;
    std::vector<int> groups;
    std::vector<Tensor> probs;
    std::vector<IndexSet> h_attr, h_attn, rationales;

    for (const auto& inst : instances) {
        Encoded enc = encode(inst, model.vocab, model.config.max_len);
        ModelOutput out = forward(model.config, model.params, enc);
        InstanceEval ie;
        ie.prediction = argmax(out.answer_logits.value());
        ie.passage_length = enc.passage_length();
        probs.push_back(Tensor::constant(softmax_rows(out.answer_logits.detach()).to_matrix()));
        if (opts.alignment) {
            // rationale indices past a truncated passage cannot be highlighted
            IndexSet rat;
            for (auto r : inst.rationale)
                if (r < ie.passage_length) rat.push_back(r);
            std::size_t k = opts.k ? opts.k : rat.size();

            auto attn = cls_attention_scores(out);
            ie.highlights_attention = extract_highlights(attn, enc.passage_begin, enc.passage_end, k);

            Tensor y = slice_cols(out.answer_logits, ie.prediction, ie.prediction + 1);
            backward(y);
            auto attr = attribution_from_graph(out);
            auto norm = normalize_attribution(attr);
            ie.attribution_scores = norm.scores;
            ie.highlights_attribution = extract_highlights(norm.scores, enc.passage_begin, enc.passage_end, k);

            h_attr.push_back(ie.highlights_attribution);
            h_attn.push_back(ie.highlights_attention);
            rationales.push_back(rat);
        }
        preds.push_back(ie.prediction);
        refs.push_back(inst.answer);
        groups.push_back(inst.group);
        rep.details.push_back(std::move(ie));
    }
    if (opts.alignment)
        for (auto p : model.params.all()) p.zero_grad();

    rep.accuracy = accuracy(preds, refs);
    rep.macro_f1 = macro_f1(preds, refs, model.config.n_options);
    if (opts.alignment) {
        rep.alignment_attribution = attention_alignment(h_attr, rationales);
        rep.alignment_attention = attention_alignment(h_attn, rationales);
    }
    rep.groups = group_accuracy_gap(preds, refs, groups);
    rep.fairness_penalty = fairness_penalty(probs, groups).value.item();
    return rep;
}

namespace {

ordered_json report_object(const EvalReport& r) {
    ordered_json j;
    j["split"] = r.split;
    j["n_instances"] = r.n_instances;
    j["accuracy"] = r.accuracy;
    j["macro_f1"] = r.macro_f1;
    j["alignment"] = r.alignment_attribution ? ordered_json(*r.alignment_attribution) : ordered_json(nullptr);
    j["highlight_source"] = "attribution";
    ordered_json by_source;
    by_source["attribution"] = r.alignment_attribution ? ordered_json(*r.alignment_attribution) : ordered_json(nullptr);
    by_source["attention"] = r.alignment_attention ? ordered_json(*r.alignment_attention) : ordered_json(nullptr);
    j["alignment_by_source"] = by_source;
    j["per_group_accuracy"] = {{"0", r.groups.acc0}, {"1", r.groups.acc1}};
    j["per_group_count"] = {{"0", r.groups.n0}, {"1", r.groups.n1}};
    j["group_gap"] = r.groups.gap;
    j["fairness_penalty"] = r.fairness_penalty;
    return j;
}

std::string eval_record(const EvalReport& r, std::size_t step, std::size_t epoch) {
    ordered_json j;
    j["type"] = "eval";
    j["step"] = step;
    j["epoch"] = epoch;
    const ordered_json body = report_object(r);
    for (const auto& [k, v] : body.items()) j[k] = v;
    return j.dump();
}

std::string step_record(const BatchLoss& bl, std::size_t step, std::size_t epoch, bool debias) {
    ordered_json j;
    j["type"] = "step";
    j["step"] = step;
    j["epoch"] = epoch;
    j["comp"] = bl.parts.comp;
    if (debias) {
        j["kl"] = bl.parts.kl;
        j["fair"] = bl.parts.fair;
        j["bias"] = bl.parts.bias;
        j["alpha"] = bl.parts.alpha;
        j["beta"] = bl.parts.beta;
        j["single_group"] = bl.single_group;
    }
    j["total"] = bl.parts.total;
    return j.dump();
}

class LogWriter {
public:
    LogWriter(const std::filesystem::path& out_dir, const LogSink& sink, std::vector<std::string>& lines)
        : sink_(sink), lines_(lines) {
        if (!out_dir.empty()) {
            path_ = out_dir / "train_log.jsonl";
            tmp_ = path_;
            tmp_ += ".tmp";
            file_.open(tmp_, std::ios::binary | std::ios::trunc);
            if (!file_) throw std::runtime_error("cannot write " + path_.string());
        }
    }
    void write(const std::string& line) {
        lines_.push_back(line);
        if (file_.is_open()) {
            file_ << line << '\n';
            file_.flush();
        }
        if (sink_) sink_(line);
    }
    void close() {
        if (!file_.is_open()) return;
        file_.close();
        std::filesystem::rename(tmp_, path_);
    }

private:
    std::filesystem::path path_, tmp_;
    std::ofstream file_;
    const LogSink& sink_;
    std::vector<std::string>& lines_;
};

Model snapshot(const Model& m) { return Model{m.config, m.vocab, m.params.clone()}; }

}  // namespace

std::string eval_report_json(const EvalReport& report) { return report_object(report).dump(2) + "\n"; }

TrainResult train(const std::vector<Instance>& train_set, const std::vector<Instance>& dev_set, ModelConfig model_cfg,
                  const TrainConfig& cfg, const std::filesystem::path& out_dir, const LogSink& sink) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train split is empty");
    if (dev_set.empty()) throw std::invalid_argument("dev split is empty");

    Model model;
    model.vocab = Vocabulary::build(train_set);
    model_cfg.vocab_size = model.vocab.size();
    model_cfg.validate();
    model.config = model_cfg;
    model.params = init_params(model_cfg);
    for (const auto& inst : train_set)
        if (inst.options.size() != model_cfg.n_options)
            throw std::invalid_argument("instance " + inst.id + " has " + std::to_string(inst.options.size()) +
                                        " options, model expects " + std::to_string(model_cfg.n_options));

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    TrainResult res;
    LogWriter log(out_dir, sink, res.log);
    const auto params = model.params.all();
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    RandomStream dropout_rng(cfg.seed, 0xD809);

    auto run_eval = [&](std::size_t epoch) {
        EvalReport rep = evaluate(model, dev_set, "dev", EvalOptions{false, 0});
        log.write(eval_record(rep, res.steps, epoch));
        if (rep.accuracy > res.best_dev_accuracy) {
            res.best_dev_accuracy = rep.accuracy;
            res.best_epoch = epoch;
            res.best_model = snapshot(model);
            if (!out_dir.empty()) save_checkpoint(model, out_dir / "best.ckpt");
        }
    };

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        RandomStream(cfg.seed, epoch).shuffle(order);
        const bool warm = epoch <= cfg.debias_cfg.warmup_epochs;
        BatchOptions bo;
        bo.debias = cfg.debias;
        bo.alpha = warm ? 0.0 : cfg.debias_cfg.alpha;
        bo.beta = warm ? 0.0 : cfg.debias_cfg.beta;
        bo.lambda = cfg.debias_cfg.lambda;
        bo.source = cfg.debias_cfg.source;
        bo.dropout_rng = model_cfg.dropout > 0.0 ? &dropout_rng : nullptr;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + cfg.batch_size)));
            Batch batch = make_batch(train_set, idx, model.vocab, model_cfg.max_len);
            BatchLoss bl = batch_loss(model_cfg, model.params, batch, bo);
            ++res.steps;
            log.write(step_record(bl, res.steps, epoch, cfg.debias));
            try {
                if (!std::isfinite(bl.parts.total) || !std::isfinite(bl.parts.bias))
                    throw TrainingDiverged("loss became non-finite at step " + std::to_string(res.steps));
                backward(bl.objective);
                sgd_step(params, cfg.eta);
            } catch (const std::exception& e) {
                if (!out_dir.empty()) save_checkpoint(model, out_dir / "last_good.ckpt");
                log.close();
                throw TrainingDiverged(std::string(e.what()) + "; last good parameters kept");
            }
            for (auto p : params) p.zero_grad();
            if (cfg.eval_every && res.steps % cfg.eval_every == 0) run_eval(epoch);
        }
        if (!cfg.eval_every) run_eval(epoch);
    }
    if (cfg.eval_every && res.steps % cfg.eval_every != 0) run_eval(cfg.epochs);

    res.final_model = snapshot(model);
    if (!out_dir.empty()) save_checkpoint(model, out_dir / "final.ckpt");
    log.close();
    return res;
}

SeedAggregate aggregate(const std::vector<EvalReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("aggregate over zero runs");
    SeedAggregate a;
    a.runs = reports.size();
    auto summarize = [&](auto get) {
        MetricSummary s;
        for (const auto& r : reports) s.mean += get(r);
        s.mean /= static_cast<double>(reports.size());
        for (const auto& r : reports) s.std += (get(r) - s.mean) * (get(r) - s.mean);
        s.std = std::sqrt(s.std / static_cast<double>(reports.size()));
        return s;
    };
    a.accuracy = summarize([](const EvalReport& r) { return r.accuracy; });
    a.macro_f1 = summarize([](const EvalReport& r) { return r.macro_f1; });
    a.alignment_attribution = summarize([](const EvalReport& r) { return r.alignment_attribution.value_or(0.0); });
    a.alignment_attention = summarize([](const EvalReport& r) { return r.alignment_attention.value_or(0.0); });
    a.gap = summarize([](const EvalReport& r) { return r.groups.gap; });
    return a;
}

std::string aggregate_json(const SeedAggregate& agg) {
    auto ms = [](const MetricSummary& s) { return ordered_json{{"mean", s.mean}, {"std", s.std}}; };
    ordered_json j;
    j["runs"] = agg.runs;
    j["accuracy"] = ms(agg.accuracy);
    j["macro_f1"] = ms(agg.macro_f1);
    j["alignment_attribution"] = ms(agg.alignment_attribution);
    j["alignment_attention"] = ms(agg.alignment_attention);
    j["group_gap"] = ms(agg.gap);
    return j.dump(2) + "\n";
}

}  // namespace xrc
