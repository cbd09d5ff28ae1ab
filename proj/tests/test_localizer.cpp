#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "localizer.hpp"
#include "reference_forward.hpp"

using namespace cedit;

namespace {

ModelConfig small_config(int layers = 2, int vocab = 23) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.d_ff = 32;
    cfg.vocab_size = vocab;
    cfg.max_seq = 16;
    cfg.seed = 77;
    return cfg;
}

std::vector<int> some_tokens(const ModelConfig& cfg, int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> out;
    for (int i = 0; i < n; ++i) out.push_back(rng.uniform_int(cfg.vocab_size));
    return out;
}

void zero_all_params(Transformer& m) {
    for (const auto& name : m.param_names()) {
        auto& d = m.param(name).mutable_data();
        std::fill(d.begin(), d.end(), 0.0f);
    }
    for (const auto& name : m.param_names()) {
        if (name.find("norm") != std::string::npos) {
            auto& d = m.param(name).mutable_data();
            std::fill(d.begin(), d.end(), 1.0f);
        }
    }
}

// One-layer model where the MLP writes sign*post into residual dim 7, which
// the lm_head maps onto the target token. Subject token 1 activates the MLP,
// subject token 2 does not.
Transformer crafted_mlp_model(float sign) {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    cfg.vocab_size = 6;
    cfg.max_seq = 4;
    cfg.seed = 1;
    Transformer m(cfg);
    zero_all_params(m);
    m.param("embed").mutable_data()[size_t(1 * 8 + 0)] = 1.0f;  // token 1 -> e0
    m.param("embed").mutable_data()[size_t(2 * 8 + 1)] = 1.0f;  // token 2 -> e1
    m.param("layers.0.mlp.gate_up_proj").mutable_data()[size_t(0 * 16 + 0)] = 1.0f;  // gate
    m.param("layers.0.mlp.gate_up_proj").mutable_data()[size_t(0 * 16 + 8)] = 1.0f;  // up
    m.param("layers.0.mlp.down_proj").mutable_data()[size_t(0 * 8 + 7)] = sign;
    m.param("lm_head").mutable_data()[size_t(7 * 6 + 3)] = 1.0f;  // dim 7 -> token 3
    return m;
}

}  // namespace

TEST_CASE("activation magnitude basics") {
    Transformer m(small_config());
    std::vector<std::vector<int>> prompts{some_tokens(m.config(), 6, 1),
                                          some_tokens(m.config(), 8, 2)};

    SUBCASE("zeroed weights give all-zero scores") {
        zero_all_params(m);
        for (const auto& cs : activation_magnitude(m, prompts)) {
            CHECK(cs.score == 0.0);
        }
    }

    SUBCASE("scores are invariant to prompt order") {
        auto a = activation_magnitude(m, prompts);
        std::vector<std::vector<int>> reversed{prompts[1], prompts[0]};
        auto b = activation_magnitude(m, reversed);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].component == b[i].component);
            CHECK(a[i].score == doctest::Approx(b[i].score).epsilon(1e-12));
        }
    }

    SUBCASE("head score matches the independent recomputation") {
        auto scores = activation_magnitude(m, prompts);
        const auto& cfg = m.config();
        for (int head = 0; head < cfg.n_heads; ++head) {
            double expect = 0;
            for (const auto& prompt : prompts) {
                refmodel::RefResult ref = refmodel::ref_forward(m, prompt);
                const int last = int(prompt.size()) - 1;
                double acc = 0;
                for (int j = 0; j < cfg.d_head(); ++j) {
                    acc += std::abs(ref.layers[1].z_heads[size_t(head)]
                                              [size_t(last * cfg.d_head() + j)]);
                }
                expect += acc / cfg.d_head();
            }
            expect /= double(prompts.size());
            const std::string name = HookPoint{1, HookSite::attn_z, head}.str();
            bool found = false;
            for (const auto& cs : scores) {
                if (cs.component == name) {
                    CHECK(cs.score == doctest::Approx(expect).epsilon(1e-4));
                    found = true;
                }
            }
            CHECK(found);
        }
    }

    CHECK_THROWS_AS(activation_magnitude(m, {}), Error);
}

TEST_CASE("output patching drops") {
    Transformer m(small_config());
    std::vector<int> clean = some_tokens(m.config(), 7, 5);
    std::vector<int> corrupted = some_tokens(m.config(), 7, 9);
    const int target = 4;

    SUBCASE("corrupted == clean gives zero drops") {
        for (const auto& cs : output_patch(m, clean, clean, target)) {
            CHECK(std::abs(cs.score) < 1e-6);
        }
        for (const auto& cs : refined_patch(m, clean, clean, target)) {
            CHECK(std::abs(cs.score) < 1e-6);
        }
    }

    SUBCASE("length mismatch is an alignment error") {
        std::vector<int> shorter = some_tokens(m.config(), 5, 9);
        CHECK_THROWS_AS(output_patch(m, clean, shorter, target), Error);
    }

    SUBCASE("hook_pre drop matches reference recomputation") {
        auto drops = refined_patch(m, clean, corrupted, target);
        auto [cl, corr_cache] = m.forward_with_cache(corrupted, m.all_hooks());
        const double clean_logit =
            refmodel::ref_forward(m, clean).logits[size_t(6 * m.config().vocab_size + target)];
        for (int layer = 0; layer < m.config().n_layers; ++layer) {
            ActivationCache patch;
            HookPoint hp{layer, HookSite::mlp_pre, -1};
            patch.emplace(hp, corr_cache.at(hp).clone());
            refmodel::RefResult ref = refmodel::ref_forward(m, clean, &patch);
            const double expect =
                clean_logit - ref.logits[size_t(6 * m.config().vocab_size + target)];
            for (const auto& cs : drops) {
                if (cs.component == hp.str()) {
                    CHECK(cs.score == doctest::Approx(expect).epsilon(5e-3));
                }
            }
        }
    }
}

TEST_CASE("sign semantics of logit drops") {
    // Suppressive site: patching away the suppression raises the target logit,
    // so the drop is negative.
    Transformer neg = crafted_mlp_model(-1.0f);
    std::vector<int> clean{1}, corrupted{2};
    auto drops = output_patch(neg, clean, corrupted, /*target=*/3);
    double post_drop = 0;
    for (const auto& cs : drops) {
        if (cs.component == "layers.0.mlp.hook_post") post_drop = cs.score;
    }
    CHECK(post_drop < -1.0);

    // Supportive site: the same construction with positive sign drops the
    // logit when patched, and zero-ablation reduces the clean target logit.
    Transformer pos = crafted_mlp_model(1.0f);
    auto pos_drops = output_patch(pos, clean, corrupted, 3);
    double pos_post = 0;
    for (const auto& cs : pos_drops) {
        if (cs.component == "layers.0.mlp.hook_post") pos_post = cs.score;
    }
    CHECK(pos_post > 1.0);

    const double clean_logit =
        double(pos.forward(clean).at(0, 3));
    ActivationCache zeros;
    zeros.emplace(HookPoint{0, HookSite::mlp_post, -1}, TensorF::zeros({1, pos.config().d_ff}));
    const double ablated = double(pos.forward_with_patch(clean, zeros).at(0, 3));
    CHECK(ablated < clean_logit);
}

TEST_CASE("gradient norms") {
    Transformer m(small_config(1));
    std::vector<int> prompt = some_tokens(m.config(), 5, 3);
    const int target = 7;

    auto scores = gradient_norms(m, prompt, target, m.module_names());
    // 4 modules, qkv adds 3 slices, gate_up adds 2.
    CHECK(scores.size() == 4 + 3 + 2);
    for (const auto& cs : scores) {
        CHECK(cs.score >= 0.0);
        CHECK(std::isfinite(cs.score));
    }
    CHECK_THROWS_AS(gradient_norms(m, prompt, target, {"bogus"}), Error);

    SUBCASE("pos_embed rows beyond the sequence get no gradient") {
        m.zero_grads();
        TapeF tape;
        TensorF logits = m.forward(prompt, &tape);
        TensorF obj = slice_cols(slice_rows(logits, 4, 5, &tape), target, target + 1, &tape);
        tape.backward(obj);
        const auto* grad = m.param("pos_embed").grad();
        REQUIRE(grad != nullptr);
        const int d = m.config().d_model;
        for (int row = int(prompt.size()); row < m.config().max_seq; ++row) {
            for (int j = 0; j < d; ++j) {
                CHECK((*grad)[size_t(row * d + j)] == 0.0f);
            }
        }
        m.zero_grads();
    }

    SUBCASE("matrix norm matches finite differences in double") {
        ModelConfig dcfg = small_config(1);
        TransformerT<double> dm(dcfg);
        std::vector<int> dprompt = some_tokens(dcfg, 5, 3);
        auto dscores = gradient_norms(dm, dprompt, target, {"layers.0.self_attn.qkv_proj"});
        const double analytic = dscores[0].score;

        TensorT<double>& w = dm.param("layers.0.self_attn.qkv_proj");
        const double h = 1e-5;
        double acc = 0;
        for (int64_t i = 0; i < w.numel(); ++i) {
            const double x0 = w.data()[size_t(i)];
            w.mutable_data()[size_t(i)] = x0 + h;
            const double fp = double(dm.forward(dprompt).at(4, target));
            w.mutable_data()[size_t(i)] = x0 - h;
            const double fm = double(dm.forward(dprompt).at(4, target));
            w.mutable_data()[size_t(i)] = x0;
            const double g = (fp - fm) / (2 * h);
            acc += g * g;
        }
        const double numeric = std::sqrt(acc);
        CHECK(std::abs(analytic - numeric) / std::max(numeric, 1e-12) < 5e-3);
    }
}

TEST_CASE("convergence rule") {
    auto table = [](std::vector<std::pair<std::string, double>> rows) {
        std::vector<ComponentScore> out;
        for (auto& [c, s] : rows) out.push_back({c, s});
        return out;
    };

    SUBCASE("component mapping") {
        CHECK(component_modules("layers.2.attn.hook_z.h1") ==
              std::vector<std::string>{"layers.2.self_attn.qkv_proj", "layers.2.self_attn.o_proj"});
        CHECK(component_modules("layers.0.self_attn.qkv_proj:W_V") ==
              std::vector<std::string>{"layers.0.self_attn.qkv_proj", "layers.0.self_attn.o_proj"});
        CHECK(component_modules("layers.1.mlp.hook_pre") ==
              std::vector<std::string>{"layers.1.mlp.gate_up_proj"});
        CHECK(component_modules("layers.3.mlp.down_proj") ==
              std::vector<std::string>{"layers.3.mlp.down_proj"});
    }

    // Ten components per metric: top-10% keeps exactly the leader.
    MetricTables metrics;
    std::vector<std::pair<std::string, double>> base;
    for (int i = 0; i < 9; ++i) {
        base.emplace_back("layers.0.attn.hook_z.h" + std::to_string(i), 0.1);
    }
    auto with_leader = [&](const std::string& leader) {
        auto rows = base;
        rows.emplace_back(leader, 5.0);
        return rows;
    };

    SUBCASE("module top-ranked in all four metrics is selected") {
        metrics[kMetricActivationMagnitude] = table(with_leader("layers.1.mlp.hook_post"));
        metrics[kMetricOutputPatch] = table(with_leader("layers.1.mlp.hook_post"));
        metrics[kMetricRefinedPatch] = table(with_leader("layers.1.mlp.hook_post"));
        metrics[kMetricGradNorm] = table(with_leader("layers.1.mlp.down_proj"));
        auto sel = converge(metrics, 0.10, 2);
        CHECK(sel == std::vector<std::string>{"layers.1.mlp.down_proj"});
    }

    SUBCASE("module in only one metric is not selected") {
        metrics[kMetricActivationMagnitude] = table(with_leader("layers.1.mlp.hook_post"));
        metrics[kMetricOutputPatch] = table(with_leader("layers.2.mlp.hook_pre"));
        metrics[kMetricRefinedPatch] = table(with_leader("layers.3.mlp.hook_pre"));
        metrics[kMetricGradNorm] = table(with_leader("layers.0.mlp.down_proj"));
        CHECK_THROWS_AS(converge(metrics, 0.10, 2), Error);
        // min_metrics = 1 admits each of them.
        auto sel = converge(metrics, 0.10, 1);
        CHECK(sel.size() == 4);
    }

    SUBCASE("negative scores rank by magnitude") {
        auto rows = base;
        rows.emplace_back("layers.1.mlp.hook_post", -5.0);
        metrics[kMetricActivationMagnitude] = table(rows);
        metrics[kMetricOutputPatch] = table(rows);
        auto sel = converge(metrics, 0.10, 2);
        CHECK(sel == std::vector<std::string>{"layers.1.mlp.down_proj"});
    }

    SUBCASE("boundary ties are all included") {
        auto rows = base;  // nine at 0.1
        rows.emplace_back("layers.1.mlp.hook_post", 0.1);  // ties with the rest
        metrics[kMetricActivationMagnitude] = table(rows);
        metrics[kMetricOutputPatch] = table(rows);
        auto sel = converge(metrics, 0.10, 2);  // k=1 but everything ties
        CHECK(std::find(sel.begin(), sel.end(), "layers.1.mlp.down_proj") != sel.end());
        CHECK(std::find(sel.begin(), sel.end(), "layers.0.self_attn.qkv_proj") != sel.end());
    }

    SUBCASE("enlarging top_fraction never removes a selected module") {
        Rng rng(42);
        std::vector<std::pair<std::string, double>> rows;
        for (int l = 0; l < 4; ++l) {
            for (int h = 0; h < 4; ++h) {
                rows.emplace_back("layers." + std::to_string(l) + ".attn.hook_z.h" +
                                      std::to_string(h),
                                  rng.normal());
            }
            rows.emplace_back("layers." + std::to_string(l) + ".mlp.hook_post", rng.normal());
        }
        metrics[kMetricActivationMagnitude] = table(rows);
        rng.shuffle(rows);
        metrics[kMetricOutputPatch] = table(rows);
        rng.shuffle(rows);
        metrics[kMetricRefinedPatch] = table(rows);

        std::vector<std::string> prev;
        for (double f : {0.1, 0.2, 0.35, 0.5, 0.8, 1.0}) {
            std::vector<std::string> cur;
            try {
                cur = converge(metrics, f, 2);
            } catch (const Error&) {
                cur = {};
            }
            for (const auto& mod : prev) {
                CHECK(std::find(cur.begin(), cur.end(), mod) != cur.end());
            }
            prev = cur;
        }
    }

    SUBCASE("bad parameters rejected") {
        CHECK_THROWS_AS(converge(metrics, 0.0, 2), Error);
        CHECK_THROWS_AS(converge(metrics, 0.1, 0), Error);
    }
}

TEST_CASE("localize driver: determinism, serialization, independent recomputation") {
    WorldConfig wcfg;
    FactWorld world = FactWorld::generate(wcfg);
    ModelConfig mcfg;
    mcfg.n_layers = 2;
    mcfg.d_model = 32;
    mcfg.n_heads = 4;
    mcfg.d_ff = 64;
    mcfg.vocab_size = world.tokenizer().size();
    mcfg.max_seq = 32;
    mcfg.seed = 5;
    Transformer model(mcfg);

    LocalizeOptions opts;
    opts.n_pairs = 2;
    LocalizationReport r1 = localize(model, world, opts);
    LocalizationReport r2 = localize(model, world, opts);
    CHECK(r1.to_json().dump() == r2.to_json().dump());

    // Every metric table covers the expected component counts.
    CHECK(r1.metrics.at(kMetricActivationMagnitude).size() == size_t(2 * 4 + 2));
    CHECK(r1.metrics.at(kMetricOutputPatch).size() == size_t(2 * 4 + 2));
    CHECK(r1.metrics.at(kMetricRefinedPatch).size() == size_t(2 * 4 + 2));
    CHECK(r1.metrics.at(kMetricGradNorm).size() == size_t(2 * (4 + 3 + 2)));

    // Prompts pair up with identical token lengths.
    REQUIRE(r1.clean_prompts.size() == r1.corrupted_prompts.size());
    for (size_t i = 0; i < r1.clean_prompts.size(); ++i) {
        CHECK(world.tokenizer().encode(r1.clean_prompts[i]).size() ==
              world.tokenizer().encode(r1.corrupted_prompts[i]).size());
    }

    const std::string path =
        (std::filesystem::temp_directory_path() / "cedit_localization.json").string();
    save_localization(r1, path, {{"parent", "x"}});
    LocalizationReport back = load_localization(path);
    CHECK(back.to_json().dump() == r1.to_json().dump());

    // Convergence recomputed independently from the serialized tables.
    if (!back.localization_failed) {
        auto again = converge(back.metrics, back.top_fraction, back.min_metrics);
        CHECK(again == back.converged);
    }

    // Single-prompt protocol runs one pair.
    LocalizeOptions single;
    single.single_prompt = true;
    LocalizationReport rs = localize(model, world, single);
    CHECK(rs.clean_prompts.size() == 1);
}
