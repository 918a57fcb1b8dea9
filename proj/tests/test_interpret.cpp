#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>
#include <set>

#include <json.hpp>

#include "support.hpp"
#include "xrc/gradcheck.hpp"
#include "xrc/interpret.hpp"
#include "xrc/io.hpp"

using namespace xrc;

namespace {

Matrix random_stochastic(RandomStream& rng, std::size_t n) {
    Matrix a(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (a(i, j) = rng.uniform());
        for (std::size_t j = 0; j < n; ++j) a(i, j) /= s;
    }
    return a;
}

HeatmapConfig heat(double gamma, double eps) {
    HeatmapConfig c;
    c.gamma = gamma;
    c.epsilon = eps;
    return c;
}

Model tiny_model(std::uint64_t seed, std::size_t layers = 2, std::size_t heads = 2, std::size_t d_model = 16) {
    Model m;
    auto insts = tiny_instances(8, seed);
    m.vocab = Vocabulary::build(insts);
    m.config = tiny_model_config(seed);
    m.config.vocab_size = m.vocab.size();
    m.config.n_layers = layers;
    m.config.n_heads = heads;
    m.config.d_model = d_model;
    m.params = init_params(m.config);
    return m;
}

}  // namespace

TEST_CASE("enhance_heatmap worked values") {
    Matrix a(1, 3, {0.5, 0.25, 0.25});
    Matrix h = enhance_heatmap(a, heat(2.0, 0.0));
    CHECK(std::abs(h(0, 0) - 2.0 / 3.0) < 1e-15);
    CHECK(std::abs(h(0, 1) - 1.0 / 6.0) < 1e-15);
    CHECK(std::abs(h(0, 2) - 1.0 / 6.0) < 1e-15);

    Matrix h1 = enhance_heatmap(a, heat(1.0, 1.0));
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(h1(0, j) - a(0, j) / 2.0) < 1e-15);
}

TEST_CASE("enhance_heatmap errors") {
    CHECK_THROWS_AS(enhance_heatmap(Matrix(1, 2, {1.2, -0.2}), heat(2.0, 0.0)), std::invalid_argument);
    CHECK_THROWS_AS(enhance_heatmap(Matrix(1, 2, {0.5, 0.5}), heat(0.0, 0.0)), std::invalid_argument);
    CHECK_THROWS_AS(enhance_heatmap(Matrix(1, 2, {0.5, 0.5}), heat(-1.0, 0.0)), std::invalid_argument);
    CHECK_THROWS_AS(enhance_heatmap(Matrix(1, 2, {0.5, 0.5}), heat(1.0, -1e-3)), std::invalid_argument);
}

TEST_CASE("enhance_heatmap properties on random row-stochastic input") {
    RandomStream rng(31, 0);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(10);
        Matrix a = random_stochastic(rng, n);
        for (double gamma : {0.5, 1.0, 2.0, 4.0}) {
            Matrix h = enhance_heatmap(a, heat(gamma, 0.0));
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    s += h(i, j);
                    CHECK(h(i, j) >= 0.0);
                    for (std::size_t k = 0; k < n; ++k)
                        if (a(i, j) > a(i, k)) CHECK(h(i, j) > h(i, k));
                }
                CHECK(std::abs(s - 1.0) <= 1e-9);
            }
        }
        Matrix id = enhance_heatmap(a, heat(1.0, 0.0));
        for (std::size_t k = 0; k < a.data.size(); ++k) CHECK(std::abs(id.data[k] - a.data[k]) <= 1e-12);
    }
}

TEST_CASE("normalize_attribution worked values") {
    const std::vector<double> x{1.0, 2.0, 3.0};
    auto r = normalize_attribution(x);
    const double s = std::sqrt(1.5);
    CHECK(std::abs(r.scores[0] + s) < 1e-12);
    CHECK(std::abs(r.scores[1]) < 1e-15);
    CHECK(std::abs(r.scores[2] - s) < 1e-12);
    CHECK(r.scores[2] == doctest::Approx(1.2247).epsilon(1e-4));
    CHECK(r.mu == 2.0);
    CHECK(std::abs(r.sigma - std::sqrt(2.0 / 3.0)) < 1e-15);
    CHECK_FALSE(r.degenerate);

    const std::vector<double> c{5.0, 5.0, 5.0};
    auto d = normalize_attribution(c);
    CHECK(d.degenerate);
    for (double v : d.scores) CHECK(v == 0.0);

    CHECK_THROWS_AS(normalize_attribution(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("normalize_attribution is a z-score and affine invariant") {
    RandomStream rng(41, 0);
    for (int t = 0; t < 300; ++t) {
        const std::size_t n = 2 + rng.below(30);
        auto x = test::random_values(rng, n, -5.0, 5.0);
        auto r = normalize_attribution(x);
        if (r.degenerate) continue;
        double mean = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double v : r.scores) var += (v - mean) * (v - mean);
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(std::abs(std::sqrt(var / static_cast<double>(n)) - 1.0) <= 1e-6);

        const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-10.0, 10.0);
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i] + b;
        auto ry = normalize_attribution(y);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(ry.scores[i] - r.scores[i]) <= 1e-9);
    }
}

TEST_CASE("normalize_attribution keeps a zero mean when the spread is tiny next to the offset") {
    RandomStream rng(43, 0);
    for (int t = 0; t < 300; ++t) {
        const std::size_t n = 2 + rng.below(40);
        const double scale = std::pow(10.0, rng.uniform(-6.0, 0.0)), shift = rng.uniform(-1e3, 1e3);
        std::vector<double> x(n);
        for (auto& v : x) v = shift + scale * rng.uniform(-1.0, 1.0);
        auto r = normalize_attribution(x);
        if (r.degenerate) continue;
        const double mean = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / static_cast<double>(n);
        double var = 0.0;
        for (double v : r.scores) var += (v - mean) * (v - mean);
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(std::abs(std::sqrt(var / static_cast<double>(n)) - 1.0) <= 1e-6);
    }
}

TEST_CASE("extract_highlights ordering and ties") {
    const std::vector<double> dec{9, 9, 5, 4, 3, 2, 1};
    CHECK(extract_highlights(dec, 2, 7, 2) == std::vector<std::size_t>{0, 1});

    // passage-relative positions 3 and 5 tie at the k-th rank
    const std::vector<double> tie{0, 7, 6, 1, 2, 1, 0};
    CHECK(extract_highlights(tie, 0, 7, 3) == std::vector<std::size_t>{1, 2, 4});
    CHECK(extract_highlights(tie, 0, 7, 4) == std::vector<std::size_t>{1, 2, 3, 4});

    // k beyond the passage length is clamped
    CHECK(extract_highlights(dec, 4, 7, 10) == std::vector<std::size_t>{0, 1, 2});
    CHECK_THROWS_AS(extract_highlights(dec, 4, 9, 1), std::invalid_argument);
}

TEST_CASE("extract_highlights equals a brute-force oracle and ignores monotone transforms") {
    RandomStream rng(43, 0);
    for (int t = 0; t < 300; ++t) {
        const std::size_t n = 4 + rng.below(20);
        std::vector<double> s(n);
        for (auto& v : s) v = static_cast<double>(rng.below(6));  // frequent ties
        const std::size_t b = rng.below(n / 2), e = b + 1 + rng.below(n - b);
        const std::size_t k = 1 + rng.below(4);

        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t i = b; i < e; ++i) all.emplace_back(-s[i], i - b);
        std::sort(all.begin(), all.end());
        std::vector<std::size_t> expect;
        for (std::size_t i = 0; i < std::min(k, all.size()); ++i) expect.push_back(all[i].second);
        std::sort(expect.begin(), expect.end());

        CHECK(extract_highlights(s, b, e, k) == expect);
        std::vector<double> tr(n);
        for (std::size_t i = 0; i < n; ++i) tr[i] = std::exp(0.7 * s[i]) - 3.0;
        CHECK(extract_highlights(tr, b, e, k) == expect);
    }
}

TEST_CASE("attribution requires a completed backward pass") {
    Model m = tiny_model(3);
    auto insts = tiny_instances(1, 3);
    ModelOutput out = forward(m.config, m.params, encode(insts[0], m.vocab, m.config.max_len));
    CHECK_THROWS_AS(attribution_from_graph(out), std::logic_error);
}

TEST_CASE("attribution matches finite differences on the retained attention") {
    for (std::uint64_t seed : {1, 2, 3}) {
        Model m = tiny_model(seed, 1, 1, 4);
        m.config.max_len = 4;
        Instance inst;
        inst.id = "t";
        inst.question = {"q"};
        inst.passage = {};
        Encoded e = encode(inst, m.vocab, 4);
        REQUIRE(e.ids.size() == 4);
        const std::size_t target = seed % 2;
        auto res = attribute_tokens(m, e, target);

        ModelOutput out = forward(m.config, m.params, e);
        const Matrix a = out.attention[0][0].to_matrix();
        std::vector<double> expect(4, 0.0);
        for (std::size_t idx = 0; idx < a.data.size(); ++idx) {
            std::vector<std::vector<Matrix>> plus{{a}}, minus{{a}};
            plus[0][0].data[idx] += 1e-5;
            minus[0][0].data[idx] -= 1e-5;
            ForwardOptions po, mo;
            po.attention_override = &plus;
            mo.attention_override = &minus;
            const double g = (forward(m.config, m.params, e, po).answer_logits.value()[target] -
                              forward(m.config, m.params, e, mo).answer_logits.value()[target]) /
                             2e-5;
            expect[idx % 4] += g * a.data[idx];
        }
        CHECK(relative_error(res.attr, expect) <= 1e-6);
    }
}

TEST_CASE("attribution on padded input") {
    Model m = tiny_model(5);
    auto insts = tiny_instances(6, 5);
    for (const auto& inst : insts) {
        Encoded e = encode(inst, m.vocab, m.config.max_len);
        REQUIRE(e.n_valid < e.ids.size());
        auto r = attribute_tokens(m, e);
        CHECK(r.attr.size() == e.ids.size());
        for (std::size_t i = e.n_valid; i < r.attr.size(); ++i) CHECK(std::abs(r.attr[i]) <= 1e-9);
        CHECK(r.target_class == argmax(forward(m.config, m.params, e).answer_logits.value()));
        CHECK(r.passage_begin == e.passage_begin);
        CHECK(r.passage_end == e.passage_end);
        // parameter gradients are not left behind
        for (const auto& p : m.params.all())
            for (double g : p.has_grad() ? p.grad() : std::vector<double>{}) CHECK(g == 0.0);
    }
}

TEST_CASE("scaling the answer head scales attribution and preserves the ranking") {
    Model m = tiny_model(9);
    auto inst = tiny_instances(1, 9)[0];
    Encoded e = encode(inst, m.vocab, m.config.max_len);
    auto base = attribute_tokens(m, e);
    Model scaled = m;
    scaled.params = m.params.clone();
    for (double& w : scaled.params.ans_w.mutable_value()) w *= 3.0;
    for (double& w : scaled.params.ans_b.mutable_value()) w *= 3.0;
    auto r = attribute_tokens(scaled, e);
    CHECK(r.target_class == base.target_class);
    for (std::size_t i = 0; i < r.attr.size(); ++i) CHECK(std::abs(r.attr[i] - 3.0 * base.attr[i]) <= 1e-9);
    for (std::size_t i = 0; i < r.scores.size(); ++i) CHECK(std::abs(r.scores[i] - base.scores[i]) <= 1e-9);
}

TEST_CASE("attending-axis attribution is the row reduction") {
    Model m = tiny_model(4);
    auto inst = tiny_instances(1, 4)[0];
    Encoded e = encode(inst, m.vocab, m.config.max_len);
    ModelOutput out = forward(m.config, m.params, e);
    backward(slice_cols(out.answer_logits, 0, 1));
    auto col = attribution_from_graph(out, AttributionAxis::AttendedTo);
    auto row = attribution_from_graph(out, AttributionAxis::Attending);
    // both reductions partition the same G⊙A total
    CHECK(std::abs(std::accumulate(col.begin(), col.end(), 0.0) - std::accumulate(row.begin(), row.end(), 0.0)) <
          1e-12);
    for (auto p : m.params.all()) p.zero_grad();
}

TEST_CASE("heatmap csv serialization") {
    Matrix h(2, 2, {1.0, 0.0, 1.0 / 3.0, 2.0 / 3.0});
    const std::string csv = heatmap_csv(h, {"a", "b"}, {"a", "b"});
    CHECK(csv.substr(0, csv.find('\n')) == "token,a,b");
    std::size_t cells = 0;
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) cells += static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    CHECK(cells == 4);
    CHECK(parse_heatmap_csv(csv) == h);
    CHECK_THROWS_AS(heatmap_csv(h, {"a"}, {"a", "b"}), std::invalid_argument);

    RandomStream rng(2, 0);
    Matrix r = random_stochastic(rng, 7);
    std::vector<std::string> labels{"[CLS]", "a,b", "q\"x", "d", "e", "f", "g"};
    CHECK(parse_heatmap_csv(heatmap_csv(r, labels, labels)) == r);
}

TEST_CASE("heatmap svg colour map") {
    auto fills = [](const std::string& svg) {
        std::set<std::string> out;
        std::regex re("<rect x=\"[0-9]+\" y=\"[0-9]+\" width=\"16\" height=\"16\" fill=\"(#[0-9a-f]{6})\"");
        for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it) out.insert((*it)[1]);
        return out;
    };
    Matrix c(3, 3, 0.25);
    std::vector<std::string> l{"x", "y", "z"};
    CHECK(fills(heatmap_svg(c, l, l)).size() == 1);

    Matrix g(1, 2, {0.1, 0.9});
    const std::string svg = heatmap_svg(g, {"r"}, {"lo", "hi"});
    auto f = fills(svg);
    CHECK(f.count("#ffffff") == 1);
    CHECK(f.size() == 2);
    CHECK(svg.find(">lo</text>") != std::string::npos);
    CHECK(svg.find("linearGradient") != std::string::npos);
}

TEST_CASE("render_heatmap writes both files and reports unwritable paths") {
    test::TempDir dir("heat");
    Matrix h(2, 2, {0.5, 0.5, 0.1, 0.9});
    render_heatmap(h, {"a", "b"}, {"a", "b"}, dir / "h.csv", dir / "h.svg");
    CHECK(parse_heatmap_csv(read_file(dir / "h.csv")) == h);
    CHECK(read_file(dir / "h.svg").rfind("<svg", 0) == 0);
    CHECK_THROWS(render_heatmap(h, {"a", "b"}, {"a", "b"}, "/nonexistent/dir/h.csv", "/nonexistent/dir/h.svg"));
}

TEST_CASE("attribution json schema") {
    AttributionResult r;
    r.attr = {0.1, 0.2};
    r.scores = {-1.0, 1.0};
    r.target_class = 1;
    r.passage_begin = 1;
    r.passage_end = 2;
    auto j = nlohmann::ordered_json::parse(attribution_json("dev-00001", r, {0}));
    for (const char* key : {"instance_id", "target_class", "attr", "scores", "degenerate_flag", "highlights"})
        CHECK(j.contains(key));
    CHECK(j["instance_id"] == "dev-00001");
    CHECK(j["attr"][1].get<double>() == 0.2);
    CHECK(j["highlights"] == nlohmann::json::array({0}));
}
