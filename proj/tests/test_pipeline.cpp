#include "doctest.h"

#include "hmim/finetune.hpp"
#include "hmim/pretrain.hpp"

#include <cmath>
#include <filesystem>
#include <set>

using namespace hmim;

namespace {

PretrainConfig toy_pretrain_config() {
    PretrainConfig cfg;
    cfg.grid = GridSpec{16, 16, 16, 8, 4};
    cfg.model.grid = cfg.grid;
    cfg.model.base_width = 2;
    cfg.model.depth = 2;
    cfg.model.projection_dim = 8;
    cfg.batch_size = 2;
    cfg.total_steps = 4;
    cfg.optim.total_steps = 4;
    cfg.optim.warmup_steps = 1;
    cfg.seed = 5;
    return cfg;
}

std::vector<Tensor<float>> toy_dataset(int n, int extent) {
    std::vector<Tensor<float>> out;
    for (int i = 0; i < n; ++i) {
        PhantomSpec ps;
        ps.h = ps.w = ps.d = extent;
        ps.seed = 1000 + i;
        out.push_back(generate_phantom(ps).image);
    }
    return out;
}

}  // namespace

TEST_CASE("contrastive assembly interleaves the two passes") {
    std::vector<Tensor<float>> a = {Tensor<float>::scalar(1), Tensor<float>::scalar(2)};
    std::vector<Tensor<float>> b = {Tensor<float>::scalar(10), Tensor<float>::scalar(20)};
    auto both = assemble_contrastive(a, b);
    REQUIRE(both.size() == 4);
    CHECK(both[0].item() == 1);
    CHECK(both[1].item() == 10);
    CHECK(both[2].item() == 2);
    CHECK(both[3].item() == 20);
}

TEST_CASE("deterministic batch composition covers the dataset pass by pass") {
    const int64_t n = 6;
    std::set<int64_t> first_pass;
    for (int64_t pos = 0; pos < n; ++pos) {
        const int64_t idx = sample_index(9, n, pos);
        CHECK(idx >= 0);
        CHECK(idx < n);
        first_pass.insert(idx);
    }
    CHECK(first_pass.size() == n);  // a permutation, not sampling with replacement
    CHECK(sample_index(9, n, 3) == sample_index(9, n, 3));
}

TEST_CASE("pretrain_step metrics and invariants") {
    auto cfg = toy_pretrain_config();
    PretrainState<float> state(cfg);
    auto data = toy_dataset(4, 16);
    std::vector<Tensor<float>> batch = {data[0], data[1]};

    StepMetrics m = state.step(batch);
    CHECK(m.step == 1);
    CHECK(m.lr == doctest::Approx(lr_at(0, cfg.optim)));
    CHECK(std::isfinite(m.losses.total));
    CHECK(m.losses.total ==
          doctest::Approx(m.losses.pr + 0.1 * m.losses.num + 0.1 * m.losses.loc +
                          0.01 * m.losses.con + 0.1 * m.losses.cl)
              .epsilon(1e-5));
    CHECK(m.step_ms > 0.0);

    // Per-step parameter change bound lr * (C_t + wd max|param|). C_t is the
    // exact Cauchy-Schwarz bound on |mhat| / sqrt(vhat); C_1 = 1, so at the
    // first step this is the plain lr * (1 + wd max|param|) form, while later
    // steps can exceed it slightly (about 0.13% at t = 2) even for standard
    // bias-corrected updates.
    const double b1 = cfg.optim.beta1, b2 = cfg.optim.beta2;
    auto moment_ratio_bound = [&](int64_t t) {
        const double r = b1 * b1 / b2;
        const double first = (1 - b1) * (1 - b1) * (1 - std::pow(b2, static_cast<double>(t))) /
                             (std::pow(1 - std::pow(b1, static_cast<double>(t)), 2) * (1 - b2));
        const double second = (1 - std::pow(r, static_cast<double>(t))) / (1 - r);
        return std::sqrt(first * second);
    };
    CHECK(moment_ratio_bound(1) == doctest::Approx(1.0).epsilon(1e-9));
    for (int extra = 0; extra < 2; ++extra) {
        std::vector<std::vector<float>> before;
        double max_param = 0;
        for (const auto& p : state.model().params()) {
            before.push_back(p.tensor.values());
            for (float x : p.tensor.values())
                max_param = std::max(max_param, std::abs(static_cast<double>(x)));
        }
        StepMetrics ms = state.step(batch);
        double max_delta = 0;
        size_t pi = 0;
        for (const auto& p : state.model().params()) {
            for (size_t j = 0; j < p.tensor.values().size(); ++j)
                max_delta = std::max(
                    max_delta, std::abs(static_cast<double>(p.tensor.values()[j]) - before[pi][j]));
            ++pi;
        }
        const double bound =
            ms.lr * (moment_ratio_bound(ms.step) + cfg.optim.weight_decay * max_param) + 1e-9;
        INFO("step ", ms.step, " delta ", max_delta, " bound ", bound);
        CHECK(max_delta <= bound);
    }

    CHECK_THROWS_AS(state.step({data[0]}), contract_error);
}

TEST_CASE("zero loss weights isolate the reconstruction term") {
    auto cfg = toy_pretrain_config();
    cfg.weights.lambda1 = cfg.weights.lambda2 = cfg.weights.lambda3 = cfg.weights.lambda4 = 0.0;
    PretrainState<float> state(cfg);
    auto data = toy_dataset(2, 16);
    StepMetrics m = state.step({data[0], data[1]});
    CHECK(m.losses.total == doctest::Approx(m.losses.pr).epsilon(1e-7));
    // and a perfect reconstruction contributes nothing
    GridSpec g = cfg.grid;
    auto plan = make_plan(g, 0.4, 3);
    auto region = select_target_region(g, 16);
    CHECK(loss_pr<float>(nullptr, data[0], data[0], plan, region).item() == 0.0f);
}

TEST_CASE("mask plans are resampled every step") {
    auto cfg = toy_pretrain_config();
    // plans are derived from (seed, step, sample); probe the generator directly
    auto p1 = make_plan(cfg.grid, 0.4, derive_seed(cfg.seed, 0x6d736bULL, 0, 0));
    auto p2 = make_plan(cfg.grid, 0.4, derive_seed(cfg.seed, 0x6d736bULL, 1, 0));
    auto p3 = make_plan(cfg.grid, 0.4, derive_seed(cfg.seed, 0x6d736bULL, 0, 1));
    CHECK(p1.patch_bits != p2.patch_bits);
    CHECK(p1.patch_bits != p3.patch_bits);
}

TEST_CASE("two identical runs produce identical metrics; different seeds differ") {
    auto cfg = toy_pretrain_config();
    auto data = toy_dataset(4, 16);
    auto a = run_pretrain(cfg, data, "/tmp/hmim_pipe_a");
    auto b = run_pretrain(cfg, data, "/tmp/hmim_pipe_b");
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        CHECK(a.metrics[i].losses.total == b.metrics[i].losses.total);
        CHECK(a.metrics[i].losses.pr == b.metrics[i].losses.pr);
        CHECK(a.metrics[i].losses.cl == b.metrics[i].losses.cl);
        CHECK(a.metrics[i].lr == b.metrics[i].lr);
    }
    auto cfg2 = cfg;
    cfg2.seed = 6;
    auto c = run_pretrain(cfg2, data, "/tmp/hmim_pipe_c");
    CHECK(a.metrics[0].losses.total != c.metrics[0].losses.total);
}

TEST_CASE("metrics csv row count equals steps and a one-step run leaves one checkpoint") {
    auto cfg = toy_pretrain_config();
    cfg.total_steps = 1;
    cfg.optim.total_steps = 1;
    cfg.optim.warmup_steps = 0;
    auto data = toy_dataset(3, 16);
    auto art = run_pretrain(cfg, data, "/tmp/hmim_pipe_one");
    CHECK(art.metrics.size() == 1);
    auto table = read_csv(art.metrics_csv_path);
    CHECK(table.columns == metrics_columns());
    CHECK(table.rows.size() == 1);
    CHECK(std::filesystem::exists(art.checkpoint_path));
}

TEST_CASE("resume reproduces the unbroken trajectory") {
    auto cfg = toy_pretrain_config();
    cfg.total_steps = 6;
    cfg.optim.total_steps = 6;
    cfg.checkpoint_every = 3;
    auto data = toy_dataset(5, 16);

    auto full = run_pretrain(cfg, data, "/tmp/hmim_pipe_full");
    REQUIRE(full.metrics.size() == 6);

    // rerun the first half in a fresh directory, then resume from its
    // step-3 checkpoint
    auto half_cfg = cfg;
    half_cfg.total_steps = 3;
    half_cfg.optim.total_steps = 6;  // schedule must match the full run
    // run_pretrain validates total_steps against optim config through lr_at
    auto part = run_pretrain(half_cfg, data, "/tmp/hmim_pipe_part");
    auto resumed = run_pretrain(cfg, data, "/tmp/hmim_pipe_part", "/tmp/hmim_pipe_part/checkpoint_final.hmck");
    REQUIRE(resumed.metrics.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(resumed.metrics[i].step == full.metrics[3 + i].step);
        CHECK(resumed.metrics[i].losses.total == doctest::Approx(full.metrics[3 + i].losses.total).epsilon(1e-12));
        CHECK(resumed.metrics[i].losses.pr == doctest::Approx(full.metrics[3 + i].losses.pr).epsilon(1e-12));
        CHECK(resumed.metrics[i].lr == full.metrics[3 + i].lr);
    }
}

TEST_CASE("pretrain rejects invalid configs") {
    auto cfg = toy_pretrain_config();
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = toy_pretrain_config();
    cfg.mask_ratio = 1.5;
    CHECK_THROWS_AS(cfg.validate(), config_error);
    cfg = toy_pretrain_config();
    CHECK_THROWS_AS(run_pretrain(cfg, {}, "/tmp/hmim_pipe_err"), config_error);
}

TEST_CASE("finetune transfers encoder weights bit-exactly and respects label fractions") {
    auto cfg = toy_pretrain_config();
    auto data = toy_dataset(4, 16);
    auto art = run_pretrain(cfg, data, "/tmp/hmim_pipe_ft_src");

    std::vector<SegSample> train, val;
    for (int i = 0; i < 6; ++i) {
        PhantomSpec ps;
        ps.h = ps.w = ps.d = 16;
        ps.n_objects = 2;
        ps.seed = 2000 + i;
        auto ph = generate_phantom(ps);
        (i < 4 ? train : val).push_back({ph.image, ph.labels});
    }

    FinetuneConfig fc;
    fc.init = art.checkpoint_path;
    fc.classes = 3;
    fc.epochs = 0;  // no training: metrics of the transferred model
    fc.seed = 3;
    fc.model = cfg.model;
    auto ft = finetune_run(fc, train, val, "/tmp/hmim_pipe_ft0");
    CHECK(ft.best.best_epoch == 0);
    CHECK(std::filesystem::exists(ft.curves_csv_path));
    CHECK(std::filesystem::exists(ft.summary_path));

    // direct check of transfer fidelity
    Checkpoint ck = read_checkpoint(art.checkpoint_path);
    ModelConfig mc = cfg.model;
    UNet3D<float> transferred(mc, 777);
    load_model(ck, transferred);
    transferred.replace_head(3, 1);
    for (const auto& p : transferred.params()) {
        if (p.name.rfind("head.seg", 0) == 0) continue;
        const Blob* b = ck.find("model." + p.name);
        REQUIRE(b != nullptr);
        CHECK(std::equal(p.tensor.values().begin(), p.tensor.values().end(), b->f32.begin()));
    }

    // identical summaries for identical seeds
    auto ft2 = finetune_run(fc, train, val, "/tmp/hmim_pipe_ft0b");
    CHECK(ft2.best.mean_dice == ft.best.mean_dice);

    // scratch runs don't need a checkpoint
    FinetuneConfig fs = fc;
    fs.init = "scratch";
    fs.epochs = 1;
    fs.label_fraction = 0.5;
    auto fts = finetune_run(fs, train, val, "/tmp/hmim_pipe_fts");
    CHECK(fts.best.mean_dice >= 0.0);

    // incompatible checkpoint: different width
    FinetuneConfig bad = fc;
    bad.model.base_width = 3;
    // checkpoint echo overrides the model config, so force a mismatch by
    // rewriting the echo
    Checkpoint broken = ck;
    broken.config["model.base_width"] = "3";
    write_checkpoint("/tmp/hmim_pipe_broken.hmck", broken);
    bad.init = "/tmp/hmim_pipe_broken.hmck";
    CHECK_THROWS_AS(finetune_run(bad, train, val, "/tmp/hmim_pipe_ftbad"), format_error);
}

TEST_CASE("evaluation metrics are invariant to the order of the validation set") {
    std::vector<SegSample> val;
    for (int i = 0; i < 3; ++i) {
        PhantomSpec ps;
        ps.h = ps.w = ps.d = 16;
        ps.n_objects = 2;
        ps.seed = 3000 + i;
        auto ph = generate_phantom(ps);
        val.push_back({ph.image, ph.labels});
    }
    ModelConfig mc;
    mc.base_width = 2;
    mc.depth = 2;
    mc.projection_dim = 4;
    mc.grid = GridSpec{16, 16, 16, 8, 4};
    UNet3D<float> model(mc, 50);
    model.replace_head(3, 2);
    auto a = evaluate_segmentation(model, val, 3);
    std::vector<SegSample> reversed = {val[2], val[1], val[0]};
    auto b = evaluate_segmentation(model, reversed, 3);
    CHECK(a.mean_dice == doctest::Approx(b.mean_dice).epsilon(1e-12));
}
