#include <doctest.h>

#include <cmath>
#include <limits>

#include <json.hpp>

#include "support.hpp"
#include "xrc/gradcheck.hpp"
#include "xrc/io.hpp"
#include "xrc/train.hpp"

using namespace xrc;
using json = nlohmann::json;

namespace {

struct TinyRun {
    Splits data;
    ModelConfig model;
    TrainConfig train;
};

TinyRun tiny_run() {
    TinyRun r;
    GeneratorSpec g;
    g.n_train = 64;
    g.n_dev = 32;
    g.n_test = 32;
    g.passage_len = 8;
    g.minority_fraction = 0.25;
    g.bias_strength = 0.75;
    r.data = generate_instances(g);
    r.model.d_model = 8;
    r.model.n_heads = 2;
    r.model.n_layers = 1;
    r.model.d_ff = 16;
    r.model.max_len = 20;
    r.model.n_options = 4;
    r.train.epochs = 2;
    r.train.batch_size = 16;
    return r;
}

std::vector<json> read_log(const std::filesystem::path& p) {
    std::vector<json> out;
    std::istringstream in(read_file(p));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line));
    return out;
}

}  // namespace

TEST_CASE("sgd_step arithmetic") {
    Tensor t = Tensor::parameter({1, 1}, {1.0}, "theta");
    t.zero_grad();
    backward(scale(t, 2.0));
    sgd_step({t}, 0.0);
    CHECK(t.value()[0] == 1.0);
    sgd_step({t}, 0.1);
    CHECK(t.value()[0] == doctest::Approx(0.8).epsilon(1e-15));

    Tensor q = Tensor::parameter({1, 1}, {1.0}, "q");
    for (int i = 0; i < 50; ++i) {
        q.zero_grad();
        backward(square(q));
        sgd_step({q}, 0.1);
    }
    CHECK(std::abs(q.value()[0] - std::pow(0.8, 50)) < 1e-18);
    CHECK(q.value()[0] == doctest::Approx(1.43e-5).epsilon(1e-2));
}

TEST_CASE("sgd_step refuses non-finite gradients and names the parameter") {
    Tensor a = Tensor::parameter({1, 2}, {1.0, 2.0}, "alpha");
    Tensor b = Tensor::parameter({1, 2}, {1.0, 2.0}, "beta");
    backward(sum(add(a, b)));
    b.zero_grad();
    const_cast<std::vector<double>&>(b.grad())[1] = std::numeric_limits<double>::quiet_NaN();
    try {
        sgd_step({a, b}, 0.1);
        FAIL("expected an error");
    } catch (const NonFiniteGradient& e) {
        CHECK(e.param() == "beta");
        CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }
    // nothing was updated
    CHECK(a.value() == std::vector<double>{1.0, 2.0});
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.eta = 0.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = TrainConfig{};
    c.batch_size = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("training is deterministic and logs every step") {
    TinyRun r = tiny_run();
    test::TempDir a("train-a"), b("train-b");
    train(r.data.train, r.data.dev, r.model, r.train, a.path());
    train(r.data.train, r.data.dev, r.model, r.train, b.path());
    for (const char* f : {"best.ckpt", "final.ckpt", "train_log.jsonl"}) CHECK(read_file(a / f) == read_file(b / f));

    auto log = read_log(a / "train_log.jsonl");
    std::size_t steps = 0, evals = 0;
    for (const auto& rec : log) {
        if (rec["type"] == "step") {
            ++steps;
            // debias off: total is exactly the comprehension loss
            CHECK(rec["total"].get<double>() == rec["comp"].get<double>());
        } else {
            CHECK(rec["type"] == "eval");
            ++evals;
            CHECK(rec.contains("accuracy"));
            CHECK(rec.contains("per_group_accuracy"));
        }
    }
    CHECK(steps == 2 * 4);
    CHECK(evals == 2);

    r.train.seed = 2;
    test::TempDir c("train-c");
    train(r.data.train, r.data.dev, r.model, r.train, c.path());
    CHECK(read_file(a / "train_log.jsonl") != read_file(c / "train_log.jsonl"));
}

TEST_CASE("debias training logs the loss breakdown with warm-up") {
    TinyRun r = tiny_run();
    r.train.debias = true;
    test::TempDir dir("train-debias");
    train(r.data.train, r.data.dev, r.model, r.train, dir.path());
    for (const auto& rec : read_log(dir / "train_log.jsonl")) {
        if (rec["type"] != "step") continue;
        for (const char* k : {"step", "comp", "kl", "fair", "bias", "total"}) CHECK(rec.contains(k));
        const double alpha = rec["alpha"], beta = rec["beta"];
        // epochs count from 1; the first one is warm-up
        if (rec["epoch"] == 1) {
            CHECK(alpha == 0.0);
            CHECK(beta == 0.0);
        } else {
            CHECK(alpha == 1.0);
            CHECK(beta == 0.5);
        }
        const double total = rec["total"], comp = rec["comp"], kl = rec["kl"], fair = rec["fair"];
        CHECK(std::abs(total - (comp + beta * kl + alpha * fair)) <= 1e-9);
        CHECK(kl >= 0.0);
        CHECK(fair >= 0.0);
    }
}

TEST_CASE("eval_every adds evaluation records between epochs") {
    TinyRun r = tiny_run();
    r.train.eval_every = 3;
    test::TempDir dir("train-evalevery");
    train(r.data.train, r.data.dev, r.model, r.train, dir.path());
    std::size_t evals = 0;
    for (const auto& rec : read_log(dir / "train_log.jsonl")) evals += rec["type"] == "eval";
    CHECK(evals >= 2);
}

TEST_CASE("training rejects empty splits") {
    TinyRun r = tiny_run();
    CHECK_THROWS_AS(train({}, r.data.dev, r.model, r.train), std::invalid_argument);
    CHECK_THROWS_AS(train(r.data.train, {}, r.model, r.train), std::invalid_argument);
}

TEST_CASE("divergence keeps the last good checkpoint") {
    TinyRun r = tiny_run();
    r.train.eta = 1e300;
    test::TempDir dir("train-diverge");
    CHECK_THROWS_AS(train(r.data.train, r.data.dev, r.model, r.train, dir.path()), TrainingDiverged);
    CHECK(std::filesystem::exists(dir / "last_good.ckpt"));
    Model m = load_checkpoint(dir / "last_good.ckpt");
    for (const auto& p : m.params.all())
        for (double v : p.value()) CHECK(std::isfinite(v));
}

TEST_CASE("evaluation report") {
    TinyRun r = tiny_run();
    TrainResult res = train(r.data.train, r.data.dev, r.model, r.train);
    EvalReport rep = evaluate(res.final_model, r.data.test, "test");
    CHECK(rep.n_instances == r.data.test.size());
    CHECK(rep.accuracy >= 0.0);
    CHECK(rep.accuracy <= 1.0);
    REQUIRE(rep.alignment_attribution.has_value());
    CHECK(*rep.alignment_attribution >= 0.0);
    CHECK(*rep.alignment_attribution <= 1.0);
    CHECK(rep.groups.gap == std::abs(rep.groups.acc0 - rep.groups.acc1));

    Labels preds, refs;
    for (std::size_t i = 0; i < r.data.test.size(); ++i) {
        preds.push_back(predict(res.final_model, r.data.test[i]));
        refs.push_back(r.data.test[i].answer);
        CHECK(rep.details[i].prediction == preds.back());
    }
    CHECK(rep.accuracy == accuracy(preds, refs));

    auto j = json::parse(eval_report_json(rep));
    for (const char* k : {"split", "n_instances", "accuracy", "macro_f1", "alignment", "highlight_source",
                          "per_group_accuracy", "group_gap"})
        CHECK(j.contains(k));
    CHECK(j["highlight_source"] == "attribution");
    CHECK(j["alignment_by_source"].contains("attention"));

    EvalReport fast = evaluate(res.final_model, r.data.test, "test", EvalOptions{false, 0});
    CHECK_FALSE(fast.alignment_attribution.has_value());
    CHECK(fast.accuracy == rep.accuracy);
}

TEST_CASE("seed aggregation uses the population standard deviation") {
    EvalReport a, b;
    a.accuracy = 0.8;
    b.accuracy = 0.9;
    a.groups.gap = 0.2;
    b.groups.gap = 0.4;
    auto agg = aggregate({a, b});
    CHECK(agg.runs == 2);
    CHECK(agg.accuracy.mean == doctest::Approx(0.85));
    CHECK(agg.accuracy.std == doctest::Approx(0.05));
    CHECK(agg.gap.mean == doctest::Approx(0.3));
    auto j = json::parse(aggregate_json(agg));
    CHECK(j["runs"] == 2);
}
