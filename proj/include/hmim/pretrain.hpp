#pragma once

// The self-supervised loop. One step:
//   for each sample: fresh mask plan -> masked input
//   pass A (dropout seed a): reconstruction + perception heads + feature
//   pass B (dropout seed b): encoder-only, second feature
//   five losses (batch means), weighted total, backward, AdamW update
//
// Contrastive features are ordered (2i, 2i+1) = (pass A, pass B) of sample i.
// Pass B is skipped when lambda4 is zero; the gradients are identical either
// way. Per-step wall time covers forward/backward/update only, not data
// handling or mask planning.
//
// Every random choice (batch order, mask plans, dropout) derives from the
// run seed and the step index, so a resumed run retraces the original one.

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "hmim/checkpoint.hpp"
#include "hmim/common.hpp"
#include "hmim/csv.hpp"
#include "hmim/data.hpp"
#include "hmim/losses.hpp"
#include "hmim/masking.hpp"
#include "hmim/model.hpp"
#include "hmim/optim.hpp"
#include "hmim/tensor.hpp"

namespace hmim {

struct PretrainConfig {
    GridSpec grid;
    double mask_ratio = 0.4;
    double mask_fill = 0.0;
    int target_cube = 0;  // 0 = full extent
    LossWeights weights;
    LossOptions loss_options;
    OptimConfig optim;
    ModelConfig model;
    int batch_size = 2;
    int64_t total_steps = 100;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0 = final only

    void validate() const {
        grid.validate();
        if (batch_size < 2) throw config_error("pretrain: batch_size must be >= 2 (contrastive negatives)");
        if (total_steps < 1) throw config_error("pretrain: total_steps must be >= 1");
        if (mask_ratio < 0 || mask_ratio > 1) throw config_error("pretrain: mask_ratio must be in [0,1]");
        weights.validate();
        model.validate();
        if (model.grid != grid) throw config_error("pretrain: model grid must match pipeline grid");
    }

    TargetRegion region() const {
        const int cube = target_cube > 0 ? target_cube : std::min({grid.h, grid.w, grid.d});
        return select_target_region(grid, cube);
    }
};

struct StepMetrics {
    int64_t step = 0;
    double lr = 0;
    LossReport losses;
    double step_ms = 0;
};

inline const std::vector<std::string>& metrics_columns() {
    static const std::vector<std::string> cols = {"step",     "lr",       "loss_pr",    "loss_num",
                                                  "loss_loc", "loss_con", "loss_cl",    "loss_total",
                                                  "l0_diag",  "step_ms"};
    return cols;
}

inline std::vector<std::string> metrics_row(const StepMetrics& m) {
    return {std::to_string(m.step),  fmt_num(m.lr),         fmt_num(m.losses.pr),
            fmt_num(m.losses.num),   fmt_num(m.losses.loc), fmt_num(m.losses.con),
            fmt_num(m.losses.cl),    fmt_num(m.losses.total),
            std::to_string(m.losses.l0_diagnostic), fmt_num(m.step_ms)};
}

// (2i, 2i+1) pairing of the two per-sample encodings
template <typename S>
std::vector<Tensor<S>> assemble_contrastive(const std::vector<Tensor<S>>& pass_a,
                                            const std::vector<Tensor<S>>& pass_b) {
    if (pass_a.size() != pass_b.size()) throw contract_error("contrastive passes differ in length");
    std::vector<Tensor<S>> out;
    out.reserve(2 * pass_a.size());
    for (size_t i = 0; i < pass_a.size(); ++i) {
        out.push_back(pass_a[i]);
        out.push_back(pass_b[i]);
    }
    return out;
}

template <typename S = float>
class PretrainState {
public:
    PretrainState(const PretrainConfig& cfg)
        : cfg_(cfg), model_(cfg.model, derive_seed(cfg.seed, 0x696e6974ULL)), opt_(cfg.optim),
          region_(cfg.region()) {
        cfg.validate();
    }

    UNet3D<S>& model() { return model_; }
    AdamW<S>& optimizer() { return opt_; }
    int64_t step_count() const { return step_; }
    const PretrainConfig& config() const { return cfg_; }

    // One optimizer step over a batch of unmasked volumes.
    StepMetrics step(const std::vector<Tensor<S>>& batch) {
        if (static_cast<int>(batch.size()) != cfg_.batch_size)
            throw contract_error("pretrain_step: batch size " + std::to_string(batch.size()) +
                                 " does not match config " + std::to_string(cfg_.batch_size));
        const int64_t step_idx = step_;
        const bool want_cl = cfg_.weights.lambda4 != 0.0;

        // mask planning and label building are data preparation, not timed
        std::vector<MaskPlan> plans;
        std::vector<Tensor<S>> masked;
        std::vector<Tensor<S>> num_labels, loc_labels;
        plans.reserve(batch.size());
        for (size_t i = 0; i < batch.size(); ++i) {
            plans.push_back(make_plan(cfg_.grid, cfg_.mask_ratio, derive_seed(cfg_.seed, 0x6d736bULL, step_idx, i)));
            masked.push_back(apply_mask(batch[i], plans.back(), static_cast<S>(cfg_.mask_fill)));
            num_labels.push_back(plans.back().template count_labels<S>());
            loc_labels.push_back(plans.back().template location_labels<S>());
        }

        const auto t0 = std::chrono::steady_clock::now();
        Tape<S> tape;
        Tensor<S> pr_acc = Tensor<S>::scalar(S(0));
        Tensor<S> num_acc = Tensor<S>::scalar(S(0));
        Tensor<S> loc_acc = Tensor<S>::scalar(S(0));
        Tensor<S> con_acc = Tensor<S>::scalar(S(0));
        int64_t l0 = 0;
        std::vector<Tensor<S>> feats_a, feats_b;
        for (size_t i = 0; i < batch.size(); ++i) {
            const uint64_t seed_a = derive_seed(cfg_.seed, 0xa0, step_idx, i);
            Predictions<S> preds = model_.forward_pretrain(&tape, masked[i], true, seed_a, region_);
            Tensor<S> u = softmax(&tape, preds.num_logits, 1);
            pr_acc = add(&tape, pr_acc, loss_pr(&tape, preds.recon, batch[i], plans[i], region_, cfg_.loss_options));
            num_acc = add(&tape, num_acc, loss_num(&tape, u, num_labels[i], cfg_.loss_options));
            loc_acc = add(&tape, loc_acc, loss_loc(&tape, preds.loc_probs, loc_labels[i], cfg_.loss_options));
            con_acc = add(&tape, con_acc, loss_con(&tape, u, preds.loc_probs, cfg_.loss_options));
            l0 += l0_diagnostic(preds.loc_probs, loc_labels[i]);
            if (want_cl) {
                feats_a.push_back(preds.feature);
                const uint64_t seed_b = derive_seed(cfg_.seed, 0xb0, step_idx, i);
                auto enc_b = model_.encode(&tape, masked[i], true, seed_b);
                feats_b.push_back(model_.contrastive_feature(&tape, enc_b.bottleneck));
            }
        }
        const S inv_n = S(1) / static_cast<S>(batch.size());
        Tensor<S> pr = scale(&tape, pr_acc, inv_n);
        Tensor<S> num = scale(&tape, num_acc, inv_n);
        Tensor<S> loc = scale(&tape, loc_acc, inv_n);
        Tensor<S> con = scale(&tape, con_acc, inv_n);
        Tensor<S> cl = want_cl
                           ? loss_cl(&tape, assemble_contrastive(feats_a, feats_b),
                                     cfg_.weights.temperature, cfg_.loss_options)
                           : Tensor<S>::scalar(S(0));
        LossBundle<S> bundle = loss_total(&tape, pr, num, loc, con, cl, l0, cfg_.weights);

        model_.zero_grad();
        tape.backward(bundle.total);
        const double lr = lr_at(std::min(step_idx, cfg_.optim.total_steps), cfg_.optim);
        opt_.step(model_.params(), lr);
        const auto t1 = std::chrono::steady_clock::now();

        ++step_;
        StepMetrics m;
        m.step = step_;
        m.lr = lr;
        m.losses = bundle.report;
        m.step_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        return m;
    }

    void restore(const Checkpoint& ck) {
        load_model(ck, model_);
        load_optimizer(ck, opt_, model_.params());
        step_ = ck.get_i64("trainer.step");
    }

    Checkpoint snapshot() const {
        Checkpoint ck;
        save_model(ck, model_);
        save_optimizer(ck, const_cast<AdamW<S>&>(opt_), model_.params());
        ck.put_i64("trainer.step", step_);
        return ck;
    }

private:
    PretrainConfig cfg_;
    UNet3D<S> model_;
    AdamW<S> opt_;
    TargetRegion region_;
    int64_t step_ = 0;
};

// Deterministic batch composition: a fresh seeded permutation of the dataset
// per pass, indexed by the global sample position.
inline int64_t sample_index(uint64_t seed, int64_t dataset_size, int64_t position) {
    const int64_t pass = position / dataset_size;
    const int64_t offset = position % dataset_size;
    std::vector<int64_t> perm(dataset_size);
    for (int64_t i = 0; i < dataset_size; ++i) perm[i] = i;
    Rng rng(derive_seed(seed, 0x736866ULL, pass));
    for (int64_t i = dataset_size - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    return perm[offset];
}

struct PretrainArtifacts {
    std::string checkpoint_path;
    std::string metrics_csv_path;
    std::vector<StepMetrics> metrics;
};

template <typename S = float>
PretrainArtifacts run_pretrain(const PretrainConfig& cfg, const std::vector<Tensor<S>>& dataset,
                               const std::string& out_dir, const std::string& resume_path = "") {
    cfg.validate();
    if (dataset.empty()) throw config_error("pretrain: dataset is empty");
    std::filesystem::create_directories(out_dir);

    PretrainState<S> state(cfg);
    if (!resume_path.empty()) state.restore(read_checkpoint(resume_path));

    PretrainArtifacts art;
    art.metrics_csv_path = out_dir + "/pretrain_metrics.csv";
    art.checkpoint_path = out_dir + "/checkpoint_final.hmck";
    CsvWriter csv;
    if (!resume_path.empty()) art.metrics_csv_path = out_dir + "/pretrain_metrics_resume.csv";
    csv.open(art.metrics_csv_path, metrics_columns());

    const int64_t n = static_cast<int64_t>(dataset.size());
    while (state.step_count() < cfg.total_steps) {
        const int64_t s = state.step_count();
        std::vector<Tensor<S>> batch;
        batch.reserve(cfg.batch_size);
        for (int i = 0; i < cfg.batch_size; ++i)
            batch.push_back(dataset[sample_index(cfg.seed, n, s * cfg.batch_size + i)]);
        StepMetrics m = state.step(batch);
        art.metrics.push_back(m);
        csv.row(metrics_row(m));
        if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 && m.step < cfg.total_steps) {
            Checkpoint ck = state.snapshot();
            write_checkpoint(out_dir + "/checkpoint_step" + std::to_string(m.step) + ".hmck", ck);
        }
    }
    Checkpoint final_ck = state.snapshot();
    write_checkpoint(art.checkpoint_path, final_ck);
    return art;
}

}  // namespace hmim
