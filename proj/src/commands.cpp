#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "xrc/gradcheck.hpp"
#include "xrc/io.hpp"

namespace xrc::cmd {

using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

void write_run_config(const fs::path& dir, const RunConfig& cfg) {
    fs::create_directories(dir);
    write_file_atomic(dir / "run_config.txt", render_config(cfg));
}

std::vector<Instance> load_split(const fs::path& data_dir, const std::string& split) {
    if (split != "train" && split != "dev" && split != "test")
        throw std::invalid_argument("unknown split '" + split + "' (expected train, dev or test)");
    const fs::path path = data_dir / (split + ".jsonl");
    if (!fs::exists(path)) throw std::invalid_argument("missing split file " + path.string());
    auto instances = load(path);
    if (instances.empty()) throw std::invalid_argument("split file " + path.string() + " is empty");
    return instances;
}

// Every token must be known to the checkpoint and every layout must fit.
void check_compatible(const Model& model, const std::vector<Instance>& instances) {
    for (const auto& inst : instances) {
        if (inst.options.size() != model.config.n_options)
            throw std::invalid_argument("instance " + inst.id + " has " + std::to_string(inst.options.size()) +
                                        " options but the checkpoint expects " +
                                        std::to_string(model.config.n_options));
        auto check = [&](const std::vector<std::string>& words) {
            for (const auto& w : words)
                if (!model.vocab.contains(w))
                    throw std::invalid_argument("vocabulary mismatch: token '" + w + "' of instance " + inst.id +
                                                " is not in the checkpoint vocabulary");
        };
        check(inst.passage);
        check(inst.question);
        for (const auto& o : inst.options) check(o);
    }
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

ordered_json group_block(const EvalReport& r) {
    return ordered_json{{"accuracy", r.accuracy},
                        {"acc_g0", r.groups.acc0},
                        {"acc_g1", r.groups.acc1},
                        {"gap", r.groups.gap},
                        {"fairness_penalty", r.fairness_penalty}};
}

}  // namespace

std::string gen_data(const Settings& s, const fs::path& out_dir, bool force) {
    RunConfig cfg = s.resolve();
    if (fs::exists(out_dir) && !fs::is_directory(out_dir))
        throw std::invalid_argument(out_dir.string() + " exists and is not a directory");
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw std::invalid_argument("refusing to write into non-empty directory " + out_dir.string() +
                                    " (pass --force to overwrite)");
    Manifest m = generate(cfg.data, out_dir);
    write_run_config(out_dir, cfg);
    std::ostringstream out;
    out << "dataset written to " << out_dir.string() << "\n";
    for (const auto& f : m.files) out << "  " << f.file << "  " << f.instances << " instances  sha256 " << f.sha256 << "\n";
    return out.str();
}

std::string train(const Settings& s, const fs::path& data_dir, const fs::path& out_dir) {
    RunConfig cfg = s.resolve();
    auto train_set = load_split(data_dir, "train");
    auto dev_set = load_split(data_dir, "dev");
    ModelConfig mc = cfg.model;
    mc.n_options = train_set.front().options.size();
    write_run_config(out_dir, cfg);
    TrainResult res = xrc::train(train_set, dev_set, mc, cfg.train, out_dir);
    std::ostringstream out;
    out << "trained " << cfg.train.epochs << " epochs (" << res.steps << " steps"
        << (cfg.train.debias ? ", debias on" : "") << ")\n";
    out << "best dev accuracy " << format_double(res.best_dev_accuracy) << " at epoch " << res.best_epoch << "\n";
    out << "checkpoints: " << (out_dir / "best.ckpt").string() << ", " << (out_dir / "final.ckpt").string() << "\n";
    return out.str();
}

std::string eval(const Settings& s, const fs::path& model_path, const fs::path& data_dir, const std::string& split,
                 const fs::path& out_dir) {
    RunConfig cfg = s.resolve();
    Model model = load_checkpoint(model_path);
    auto instances = load_split(data_dir, split);
    check_compatible(model, instances);
    EvalReport rep = evaluate(model, instances, split, EvalOptions{true, cfg.highlight_k});

    // alignment restricted to correctly classified instances, against random highlights
    std::vector<IndexSet> highlights, rationales;
    std::vector<std::size_t> lengths;
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const auto& d = rep.details[i];
        if (d.prediction != instances[i].answer) continue;
        IndexSet rat;
        for (auto r : instances[i].rationale)
            if (r < d.passage_length) rat.push_back(r);
        highlights.push_back(d.highlights_attribution);
        rationales.push_back(rat);
        lengths.push_back(d.passage_length);
    }

    ordered_json j = ordered_json::parse(eval_report_json(rep));
    if (!highlights.empty()) {
        std::vector<std::size_t> ks;
        for (const auto& h : highlights) ks.push_back(h.size());
        double s_aa = attention_alignment(highlights, rationales);
        BaselineStats base = permutation_baseline(lengths, rationales, cfg.baseline_trials, cfg.train.seed, &ks);
        ordered_json c;
        c["n_instances"] = highlights.size();
        c["alignment"] = s_aa;
        c["baseline_mean"] = base.mean;
        c["baseline_std"] = base.std;
        c["baseline_trials"] = base.trials;
        c["z_score"] = base.std > 0 ? ordered_json((s_aa - base.mean) / base.std) : ordered_json(nullptr);
        j["correct_only"] = c;
    } else {
        j["correct_only"] = nullptr;
    }
    const std::string text = j.dump(2) + "\n";
    write_run_config(out_dir, cfg);
    write_file_atomic(out_dir / ("eval_" + split + ".json"), text);
    return text;
}

std::string explain(const Settings& s, const fs::path& model_path, const fs::path& data_dir,
                    const std::string& instance_id, const fs::path& out_dir) {
    RunConfig cfg = s.resolve();
    Model model = load_checkpoint(model_path);

    std::optional<Instance> found;
    std::vector<std::string> all_ids;
    for (const char* split : {"dev", "test", "train"}) {
        const fs::path path = data_dir / (std::string(split) + ".jsonl");
        if (!fs::exists(path)) continue;
        for (auto& inst : load(path)) {
            if (inst.id == instance_id) found = inst;
            all_ids.push_back(inst.id);
        }
        if (found) break;
    }
    if (!found) {
        std::stable_sort(all_ids.begin(), all_ids.end(), [&](const std::string& a, const std::string& b) {
            return edit_distance(a, instance_id) < edit_distance(b, instance_id);
        });
        std::string msg = "unknown instance id '" + instance_id + "'";
        if (!all_ids.empty()) {
            msg += "; nearest ids:";
            for (std::size_t i = 0; i < std::min<std::size_t>(5, all_ids.size()); ++i) msg += " " + all_ids[i];
        }
        throw std::invalid_argument(msg);
    }
    check_compatible(model, {*found});

    Encoded enc = encode(*found, model.vocab, model.config.max_len);
    ModelOutput out = forward(model.config, model.params, enc);
    Matrix raw_full = select_attention_view(out, cfg.heatmap);
    Matrix raw(enc.n_valid, enc.n_valid);
    for (std::size_t i = 0; i < enc.n_valid; ++i)
        for (std::size_t j = 0; j < enc.n_valid; ++j) raw(i, j) = raw_full(i, j);
    Matrix enhanced = enhance_heatmap(raw, cfg.heatmap);
    std::vector<std::string> labels(enc.tokens.begin(), enc.tokens.begin() + static_cast<std::ptrdiff_t>(enc.n_valid));

    AttributionResult attr = attribute_tokens(model, enc);
    std::size_t k = cfg.highlight_k;
    if (k == 0)
        for (auto r : found->rationale) k += r < enc.passage_length();
    auto highlights = extract_highlights(attr.scores, enc.passage_begin, enc.passage_end, k);

    write_run_config(out_dir, cfg);
    render_heatmap(enhanced, labels, labels, out_dir / "heatmap.csv", out_dir / "heatmap.svg");
    write_file_atomic(out_dir / "attention.csv", heatmap_csv(raw, labels, labels));
    write_file_atomic(out_dir / "attribution.json", attribution_json(instance_id, attr, highlights));

    std::ostringstream o;
    o << "instance " << instance_id << ": predicted " << attr.target_class << ", answer " << found->answer << "\n";
    o << "highlights:";
    for (auto h : highlights) o << " " << h << ":" << found->passage[h];
    o << "\nrationale:";
    for (auto r : found->rationale) o << " " << r << ":" << found->passage[r];
    o << "\nwrote heatmap.csv, heatmap.svg, attention.csv, attribution.json to " << out_dir.string() << "\n";
    return o.str();
}

std::string fairness_report(const Settings& s, const fs::path& before, const fs::path& after, const fs::path& data_dir,
                            const std::string& split, const fs::path& out_dir) {
    RunConfig cfg = s.resolve();
    Model mb = load_checkpoint(before);
    Model ma = load_checkpoint(after);
    auto instances = load_split(data_dir, split);
    check_compatible(mb, instances);
    check_compatible(ma, instances);
    EvalReport rb = evaluate(mb, instances, split, EvalOptions{false, 0});
    EvalReport ra = evaluate(ma, instances, split, EvalOptions{false, 0});

    ordered_json j;
    j["split"] = split;
    j["n_instances"] = instances.size();
    j["before"] = group_block(rb);
    j["after"] = group_block(ra);
    j["gap_reduction_rel"] =
        rb.groups.gap > 0.0 ? ordered_json((rb.groups.gap - ra.groups.gap) / rb.groups.gap) : ordered_json(nullptr);
    j["overall_acc_delta"] = ra.accuracy - rb.accuracy;
    const std::string text = j.dump(2) + "\n";
    write_run_config(out_dir, cfg);
    write_file_atomic(out_dir / "fairness_report.json", text);
    return text;
}

std::string gradcheck(const Settings& s, const fs::path& out_dir, const GradcheckHook& hook) {
    RunConfig cfg = s.resolve();
    GradcheckConfig gc;
    gc.seed = cfg.model.seed;
    gc.debias = cfg.train.debias_cfg;
    gc.options.corrupt_param = hook.param;
    gc.options.corrupt_offset = hook.offset;
    auto suites = run_gradcheck_suites(gc);
    const std::string text = gradcheck_json(suites, gc.options.tolerance);
    if (!out_dir.empty()) {
        write_run_config(out_dir, cfg);
        write_file_atomic(out_dir / "gradcheck.json", text);
    }
    if (!all_passed(suites)) {
        const SuiteReport* worst = &suites.front();
        for (const auto& su : suites)
            if (su.report.max_rel_error > worst->report.max_rel_error) worst = &su;
        throw GradcheckFailed("gradient check failed: suite '" + worst->name + "', parameter '" +
                                  worst->report.worst_param + "' has relative error " +
                                  format_double(worst->report.max_rel_error),
                              text);
    }
    return text;
}

}  // namespace xrc::cmd
