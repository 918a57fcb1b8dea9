#include "xrc/gradcheck.hpp"

#include <json.hpp>

#include "xrc/rng.hpp"
#include "xrc/train.hpp"

namespace xrc {

namespace {

std::vector<double> random_values(RandomStream& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return v;
}

GradReport tensor_suite(const GradcheckConfig& cfg) {
    RandomStream rng(cfg.seed, 0x7E5);
    Tensor a = Tensor::parameter({4, 6}, random_values(rng, 24), "a");
    Tensor b = Tensor::parameter({6, 5}, random_values(rng, 30), "b");
    Tensor c = Tensor::parameter({4, 5}, random_values(rng, 20), "c");
    Tensor bias = Tensor::parameter({1, 5}, random_values(rng, 5), "bias");
    Tensor gain = Tensor::parameter({1, 5}, random_values(rng, 5, 2.0), "gain");
    Tensor shift = Tensor::parameter({1, 5}, random_values(rng, 5), "shift");
    Tensor table = Tensor::parameter({7, 5}, random_values(rng, 35), "table");
    const std::vector<double> factors = random_values(rng, 20);
    Matrix mask(4, 4);
    for (std::size_t i = 0; i < 4; ++i) mask(i, 3) = kMaskValue;
    const std::vector<std::size_t> ids = {1, 3, 3, 0};
    const std::vector<std::size_t> pick = {0, 2};

    auto build = [&] {
        Tensor y = add_row_bias(add(matmul(a, b), c), bias);
        Tensor z = relu(y);
        Tensor s = softmax_rows(matmul_bt(y, c), Tensor::constant(mask));
        Tensor ln = layer_norm_rows(mul(y, c), gain, shift);
        Tensor g = gather_rows(table, ids);
        Tensor h = sub(scale(ln, 0.7), square(g));
        Tensor part1 = mean(mul_constant(add(h, z), factors));
        Tensor sel = select_row(concat_cols({s, slice_cols(h, 0, 2)}), 2);
        Tensor st = sum(stack_rows({sel, scale(sel, -0.5)}));
        Tensor m = mean_of_rows(head_rows(g, 3), pick);
        Tensor ce = cross_entropy(m, 2);
        Tensor kl = kl_divergence(softmax_rows(m), softmax_rows(select_row(y, 1)));
        return add(add(part1, ce), add(kl, scale(st, 0.1)));
    };
    return gradient_check(build, {a, b, c, bias, gain, shift, table}, cfg.options);
}

GradReport model_suite(const GradcheckConfig& cfg) {
    auto instances = tiny_instances(2, cfg.seed);
    Vocabulary vocab = Vocabulary::build(instances);
    ModelConfig mc = tiny_model_config(cfg.seed);
    mc.vocab_size = vocab.size();
    ModelParams params = init_params(mc);
    std::vector<Encoded> enc;
    for (const auto& inst : instances) enc.push_back(encode(inst, vocab, mc.max_len));

    auto build = [&] {
        Tensor total = Tensor::scalar(0.0);
        for (std::size_t i = 0; i < enc.size(); ++i) {
            ModelOutput out = forward(mc, params, enc[i]);
            total = add(total, cross_entropy(out.answer_logits, instances[i].answer));
            total = add(total, bias_loss(out.group_logits, instances[i].group));
        }
        return total;
    };
    return gradient_check(build, params.all(), cfg.options);
}

GradReport debias_suite(const GradcheckConfig& cfg) {
    auto instances = tiny_instances(4, cfg.seed + 1);
    Vocabulary vocab = Vocabulary::build(instances);
    ModelConfig mc = tiny_model_config(cfg.seed);
    mc.vocab_size = vocab.size();
    ModelParams params = init_params(mc);
    std::vector<std::size_t> idx(instances.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Batch batch = make_batch(instances, idx, vocab, mc.max_len);

    BatchOptions bo;
    bo.debias = true;
    bo.alpha = cfg.debias.alpha;
    bo.beta = cfg.debias.beta;
    bo.lambda = cfg.debias.lambda;
    bo.source = cfg.debias.source;
    // the sign direction is piecewise constant, so it is frozen for differencing
    const std::vector<Matrix> offsets = batch_loss(mc, params, batch, bo).offsets;
    bo.fixed_offsets = &offsets;
    // the probe reads a detached pooled vector, so its loss is checked against the probe head only
    GradReport total = gradient_check([&] { return batch_loss(mc, params, batch, bo).total; }, params.all(),
                                      cfg.options);
    GradReport probe = gradient_check([&] { return batch_loss(mc, params, batch, bo).probe; },
                                      {params.grp_w, params.grp_b}, cfg.options);
    for (auto& p : probe.params) {
        p.name = "probe:" + p.name;
        if (p.rel_error > total.max_rel_error) {
            total.max_rel_error = p.rel_error;
            total.worst_param = p.name;
        }
        total.params.push_back(std::move(p));
    }
    return total;
}

}  // namespace

ModelConfig tiny_model_config(std::uint64_t seed) {
    ModelConfig mc;
    mc.d_model = 16;
    mc.n_heads = 2;
    mc.n_layers = 2;
    mc.d_ff = 32;
    mc.n_options = 2;
    mc.max_len = 12;
    mc.seed = seed;
    return mc;
}

std::vector<Instance> tiny_instances(std::size_t n, std::uint64_t seed) {
    RandomStream rng(seed, 0x71A1);
    std::vector<Instance> out;
    for (std::size_t i = 0; i < n; ++i) {
        Instance inst;
        inst.id = "tiny-" + std::to_string(i);
        for (int t = 0; t < 3; ++t) inst.passage.push_back("t" + std::to_string(rng.below(6)));
        inst.question = {"q"};
        inst.options = {{"a"}, {"b"}};
        inst.answer = static_cast<std::size_t>(rng.below(2));
        inst.group = static_cast<int>(i % 2);
        inst.rationale = {static_cast<std::size_t>(rng.below(3))};
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<SuiteReport> run_gradcheck_suites(const GradcheckConfig& cfg) {
    return {{"tensor", tensor_suite(cfg)}, {"model", model_suite(cfg)}, {"debias", debias_suite(cfg)}};
}

bool all_passed(const std::vector<SuiteReport>& suites) {
    for (const auto& s : suites)
        if (!s.report.passed()) return false;
    return true;
}

std::string gradcheck_json(const std::vector<SuiteReport>& suites, double tolerance) {
    nlohmann::ordered_json j;
    j["passed"] = all_passed(suites);
    j["tolerance"] = tolerance;
    double worst = -1.0;
    std::string worst_suite, worst_param;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& s : suites) {
        nlohmann::ordered_json sj;
        sj["name"] = s.name;
        sj["passed"] = s.report.passed();
        sj["max_rel_error"] = s.report.max_rel_error;
        sj["worst_param"] = s.report.worst_param;
        nlohmann::ordered_json params = nlohmann::ordered_json::array();
        for (const auto& p : s.report.params) params.push_back({{"name", p.name}, {"rel_error", p.rel_error}});
        sj["params"] = params;
        arr.push_back(sj);
        if (s.report.max_rel_error > worst) {
            worst = s.report.max_rel_error;
            worst_suite = s.name;
            worst_param = s.report.worst_param;
        }
    }
    j["max_rel_error"] = worst;
    j["worst_suite"] = worst_suite;
    j["worst_param"] = worst_param;
    j["suites"] = arr;
    return j.dump(2) + "\n";
}

}  // namespace xrc
