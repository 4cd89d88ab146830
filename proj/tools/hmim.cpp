// hmim command-line frontend.
//
//   hmim gen-data      write a synthetic phantom dataset + manifest
//   hmim pretrain      self-supervised pre-training
//   hmim finetune      segmentation fine-tuning (scratch or checkpoint init)
//   hmim mask-preview  masked volume + plan record + slice panel image
//   hmim plot          static SVG of CSV columns
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hmim/config.hpp"
#include "hmim/csv.hpp"
#include "hmim/data.hpp"
#include "hmim/finetune.hpp"
#include "hmim/image.hpp"
#include "hmim/masking.hpp"
#include "hmim/plot.hpp"
#include "hmim/pretrain.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

std::string timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string default_out_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("HMIM_OUT_DIR")) return env;
    return "out";
}

// Written before work starts (status running) and rewritten on completion;
// a command is reproducible from this file alone.
struct Manifest {
    std::string path;
    std::string command;
    std::string start_time;
    std::vector<std::pair<std::string, std::string>> fields;

    void add(const std::string& k, const std::string& v) { fields.emplace_back(k, v); }

    void write(const std::string& status, const std::string& end_time) const {
        std::ofstream f(path);
        if (!f) throw hmim::io_error("cannot write manifest " + path);
        f << "tool_version: " << kVersion << "\n";
        f << "command: " << command << "\n";
        f << "status: " << status << "\n";
        f << "start_time: " << start_time << "\n";
        f << "end_time: " << (end_time.empty() ? "pending" : end_time) << "\n";
        for (const auto& [k, v] : fields) f << k << ": " << v << "\n";
    }
};

hmim::Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
    hmim::Config cfg = path.empty() ? hmim::Config{} : hmim::Config::from_file(path);
    for (const auto& o : overrides) cfg.apply_override(o);
    return cfg;
}

const std::set<std::string> kDataKeys = {
    "data.source",  "data.manifest", "data.count",      "data.val_count", "data.shape",
    "data.objects", "data.noise",    "data.background", "data.seed",
};

const std::set<std::string> kModelKeys = {
    "model.in_channels", "model.base_width", "model.depth", "model.dropout", "model.projection_dim",
};

const std::set<std::string> kOptimKeys = {
    "optim.lr", "optim.weight_decay", "optim.warmup_steps", "optim.beta1", "optim.beta2", "optim.eps",
};

hmim::PhantomSpec phantom_spec_from(const hmim::Config& cfg, uint64_t seed) {
    hmim::PhantomSpec ps;
    ps.h = ps.w = ps.d = static_cast<int>(cfg.get_int("data.shape", 32));
    ps.n_objects = static_cast<int>(cfg.get_int("data.objects", 2));
    ps.noise_sigma = static_cast<float>(cfg.get_double("data.noise", 0.03));
    ps.background = static_cast<float>(cfg.get_double("data.background", 0.1));
    ps.seed = seed;
    return ps;
}

hmim::ModelConfig model_config_from(const hmim::Config& cfg, const hmim::GridSpec& grid) {
    hmim::ModelConfig mc;
    mc.in_channels = static_cast<int>(cfg.get_int("model.in_channels", 1));
    mc.base_width = static_cast<int>(cfg.get_int("model.base_width", 4));
    mc.depth = static_cast<int>(cfg.get_int("model.depth", 3));
    mc.dropout_rate = cfg.get_double("model.dropout", 0.1);
    mc.projection_dim = static_cast<int>(cfg.get_int("model.projection_dim", 16));
    mc.grid = grid;
    return mc;
}

hmim::OptimConfig optim_config_from(const hmim::Config& cfg, int64_t total_steps) {
    hmim::OptimConfig oc;
    oc.lr_init = cfg.get_double("optim.lr", 1e-4);
    oc.weight_decay = cfg.get_double("optim.weight_decay", 1e-5);
    oc.warmup_steps = cfg.get_int("optim.warmup_steps", 10);
    oc.beta1 = cfg.get_double("optim.beta1", 0.9);
    oc.beta2 = cfg.get_double("optim.beta2", 0.999);
    oc.eps = cfg.get_double("optim.eps", 1e-8);
    oc.total_steps = total_steps;
    oc.warmup_steps = std::min(oc.warmup_steps, total_steps - 1);
    return oc;
}

void echo_config(Manifest& man, const hmim::Config& cfg) {
    for (const auto& [k, v] : cfg.entries()) man.add("config." + k, v);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir_flag, uint64_t seed) {
    hmim::Config cfg = load_config(config_path, overrides);
    std::set<std::string> known = kDataKeys;
    cfg.check_keys(known);
    const std::string out_dir = default_out_dir(out_dir_flag);
    std::filesystem::create_directories(out_dir);

    const int count = static_cast<int>(cfg.get_int("data.count", 12));
    const int val_count = static_cast<int>(cfg.get_int("data.val_count", 4));
    const uint64_t data_seed = cfg.has("data.seed") ? cfg.get_int("data.seed", 0) : seed;

    std::vector<hmim::ManifestEntry> entries;
    for (int i = 0; i < count + val_count; ++i) {
        hmim::PhantomSpec ps = phantom_spec_from(cfg, hmim::derive_seed(data_seed, 0xda7aULL, i));
        hmim::Phantom ph = hmim::generate_phantom(ps);
        const std::string stem = out_dir + "/vol" + std::to_string(i);
        hmim::write_volume(stem + ".hmim", ph.image);
        hmim::write_labels(stem + ".labels.hmim", ph.labels);
        entries.push_back({stem + ".hmim", i < count ? "train" : "val", stem + ".labels.hmim"});
    }
    hmim::write_manifest(out_dir + "/manifest.txt", entries);
    std::cout << "wrote " << entries.size() << " volumes and " << out_dir << "/manifest.txt\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct LoadedData {
    std::vector<hmim::Volume> train_images;
    std::vector<hmim::SegSample> train, val;
};

LoadedData load_dataset(const hmim::Config& cfg, uint64_t seed, bool need_labels) {
    LoadedData out;
    const std::string source = cfg.get_str("data.source", "synthetic");
    if (source == "synthetic") {
        const int count = static_cast<int>(cfg.get_int("data.count", 12));
        const int val_count = static_cast<int>(cfg.get_int("data.val_count", 4));
        const uint64_t data_seed = cfg.has("data.seed") ? cfg.get_int("data.seed", 0) : seed;
        for (int i = 0; i < count + val_count; ++i) {
            hmim::PhantomSpec ps = phantom_spec_from(cfg, hmim::derive_seed(data_seed, 0xda7aULL, i));
            hmim::Phantom ph = hmim::generate_phantom(ps);
            if (i < count) {
                out.train_images.push_back(ph.image);
                out.train.push_back({ph.image, ph.labels});
            } else {
                out.val.push_back({ph.image, ph.labels});
            }
        }
    } else if (source == "manifest") {
        const std::string manifest = cfg.get_str("data.manifest", "");
        if (manifest.empty()) throw hmim::config_error("data.manifest is required when data.source=manifest");
        for (const auto& e : hmim::read_manifest(manifest)) {
            hmim::Volume img = hmim::read_volume(e.path);
            hmim::SegSample s;
            s.image = img;
            if (!e.label_path.empty()) s.labels = hmim::read_labels(e.label_path);
            else if (need_labels)
                throw hmim::config_error("manifest entry " + e.path + " lacks a label path");
            if (e.split == "train") {
                out.train_images.push_back(img);
                out.train.push_back(std::move(s));
            } else {
                out.val.push_back(std::move(s));
            }
        }
    } else {
        throw hmim::config_error("data.source must be synthetic or manifest, got " + source);
    }
    return out;
}

int cmd_pretrain(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir_flag, uint64_t seed, int64_t steps_flag,
                 const std::string& resume) {
    hmim::Config cfg = load_config(config_path, overrides);
    std::set<std::string> known = kDataKeys;
    known.insert(kModelKeys.begin(), kModelKeys.end());
    known.insert(kOptimKeys.begin(), kOptimKeys.end());
    known.insert({"grid.sub_volume", "grid.patch", "mask.ratio", "mask.fill", "region.cube",
                  "loss.lambda1", "loss.lambda2", "loss.lambda3", "loss.lambda4", "loss.temperature",
                  "loss.cl_exclude_positive", "loss.pr_per_voxel", "loss.pr_full_subvolume",
                  "run.steps", "run.batch_size", "run.seed", "run.checkpoint_every"});
    cfg.check_keys(known);

    const std::string out_dir = default_out_dir(out_dir_flag);
    std::filesystem::create_directories(out_dir);

    hmim::PretrainConfig pc;
    const int shape = static_cast<int>(cfg.get_int("data.shape", 32));
    pc.grid.h = pc.grid.w = pc.grid.d = shape;
    pc.grid.sub_volume = static_cast<int>(cfg.get_int("grid.sub_volume", 16));
    pc.grid.patch = static_cast<int>(cfg.get_int("grid.patch", pc.grid.sub_volume / 2));
    pc.mask_ratio = cfg.get_double("mask.ratio", 0.4);
    pc.mask_fill = cfg.get_double("mask.fill", 0.0);
    pc.target_cube = static_cast<int>(cfg.get_int("region.cube", 0));
    pc.weights.lambda1 = cfg.get_double("loss.lambda1", 0.1);
    pc.weights.lambda2 = cfg.get_double("loss.lambda2", 0.1);
    pc.weights.lambda3 = cfg.get_double("loss.lambda3", 0.01);
    pc.weights.lambda4 = cfg.get_double("loss.lambda4", 0.1);
    pc.weights.temperature = cfg.get_double("loss.temperature", 0.5);
    pc.loss_options.cl_exclude_positive = cfg.get_bool("loss.cl_exclude_positive", false);
    pc.loss_options.pr_per_voxel = cfg.get_bool("loss.pr_per_voxel", false);
    pc.loss_options.pr_full_subvolume = cfg.get_bool("loss.pr_full_subvolume", false);
    pc.batch_size = static_cast<int>(cfg.get_int("run.batch_size", 2));
    pc.total_steps = steps_flag > 0 ? steps_flag : cfg.get_int("run.steps", 100);
    pc.seed = cfg.has("run.seed") ? static_cast<uint64_t>(cfg.get_int("run.seed", 0)) : seed;
    pc.checkpoint_every = cfg.get_int("run.checkpoint_every", 0);
    pc.model = model_config_from(cfg, pc.grid);
    pc.optim = optim_config_from(cfg, pc.total_steps);
    pc.validate();

    LoadedData data = load_dataset(cfg, pc.seed, false);
    if (data.train_images.empty()) throw hmim::config_error("pretrain: no training volumes");

    Manifest man;
    man.path = out_dir + "/manifest.txt";
    man.command = "pretrain";
    man.start_time = timestamp_now();
    man.add("seed", std::to_string(pc.seed));
    man.add("out_dir", out_dir);
    man.add("resume", resume.empty() ? "none" : resume);
    echo_config(man, cfg);
    man.add("artifact.metrics_csv",
            resume.empty() ? out_dir + "/pretrain_metrics.csv" : out_dir + "/pretrain_metrics_resume.csv");
    man.add("artifact.checkpoint", out_dir + "/checkpoint_final.hmck");
    man.write("running", "");

    hmim::PretrainArtifacts art = hmim::run_pretrain<float>(pc, data.train_images, out_dir, resume);
    man.write("complete", timestamp_now());
    std::cout << "pretrain done: " << art.metrics.size() << " steps, checkpoint " << art.checkpoint_path
              << "\n";
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::string& out_dir_flag, uint64_t seed, const std::string& init) {
    hmim::Config cfg = load_config(config_path, overrides);
    std::set<std::string> known = kDataKeys;
    known.insert(kModelKeys.begin(), kModelKeys.end());
    known.insert(kOptimKeys.begin(), kOptimKeys.end());
    known.insert({"grid.sub_volume", "grid.patch", "ft.classes", "ft.epochs", "ft.label_fraction",
                  "ft.augment", "run.seed"});
    cfg.check_keys(known);

    if (init != "scratch" && !std::filesystem::exists(init))
        throw hmim::config_error("checkpoint not found: " + init);

    const std::string out_dir = default_out_dir(out_dir_flag);
    std::filesystem::create_directories(out_dir);

    hmim::FinetuneConfig fc;
    fc.init = init;
    fc.classes = static_cast<int>(cfg.get_int("ft.classes", 3));
    fc.epochs = static_cast<int>(cfg.get_int("ft.epochs", 4));
    fc.label_fraction = cfg.get_double("ft.label_fraction", 1.0);
    fc.augment = cfg.get_bool("ft.augment", true);
    fc.seed = cfg.has("run.seed") ? static_cast<uint64_t>(cfg.get_int("run.seed", 0)) : seed;

    hmim::GridSpec grid;
    const int shape = static_cast<int>(cfg.get_int("data.shape", 32));
    grid.h = grid.w = grid.d = shape;
    grid.sub_volume = static_cast<int>(cfg.get_int("grid.sub_volume", 16));
    grid.patch = static_cast<int>(cfg.get_int("grid.patch", grid.sub_volume / 2));
    fc.model = model_config_from(cfg, grid);

    LoadedData data = load_dataset(cfg, fc.seed, true);
    if (data.train.empty() || data.val.empty())
        throw hmim::config_error("finetune: need nonempty train and val splits");

    const int64_t total_steps = std::max<int64_t>(
        1, static_cast<int64_t>(fc.epochs) *
               std::max<int64_t>(1, hmim::round_half_away(fc.label_fraction *
                                                          static_cast<double>(data.train.size()))));
    fc.optim = optim_config_from(cfg, total_steps);

    Manifest man;
    man.path = out_dir + "/manifest.txt";
    man.command = "finetune";
    man.start_time = timestamp_now();
    man.add("seed", std::to_string(fc.seed));
    man.add("init", init);
    man.add("out_dir", out_dir);
    echo_config(man, cfg);
    man.add("artifact.curves_csv", out_dir + "/finetune_curves.csv");
    man.add("artifact.summary", out_dir + "/finetune_summary.json");
    man.write("running", "");

    hmim::FinetuneArtifacts art = hmim::finetune_run<float>(fc, data.train, data.val, out_dir);
    man.write("complete", timestamp_now());

    std::cout << "finetune done: best epoch " << art.best.best_epoch << "\n";
    std::cout << "class  dice      hd95\n";
    for (size_t c = 0; c < art.best.dice_per_class.size(); ++c) {
        std::cout << "  " << c + 1 << "    " << hmim::fmt_num(art.best.dice_per_class[c]) << "   "
                  << (std::isnan(art.best.hd95_per_class[c]) ? "n/a"
                                                             : hmim::fmt_num(art.best.hd95_per_class[c]))
                  << "\n";
    }
    std::cout << "mean dice " << hmim::fmt_num(art.best.mean_dice) << "\n";
    return 0;
}

int cmd_mask_preview(const std::string& volume_path, int sub_volume, double ratio, uint64_t seed,
                     const std::string& out_prefix) {
    hmim::Volume vol = hmim::read_volume(volume_path);
    hmim::GridSpec grid;
    grid.h = vol.shape()[1];
    grid.w = vol.shape()[2];
    grid.d = vol.shape()[3];
    grid.sub_volume = sub_volume;
    grid.patch = sub_volume / 2;
    hmim::MaskPlan plan = hmim::make_plan(grid, ratio, seed);
    hmim::Volume masked = hmim::apply_mask(vol, plan);

    hmim::write_volume(out_prefix + "_masked.hmim", masked);
    hmim::write_plan(out_prefix + ".plan", plan);
    hmim::write_pgm(out_prefix + ".pgm", hmim::mask_preview_panels(vol, masked, plan));
    std::cout << "masked " << plan.total_masked() << " of " << grid.patches() << " patches; wrote "
              << out_prefix << "_masked.hmim, " << out_prefix << ".plan, " << out_prefix << ".pgm\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& csvs, const std::string& columns, const std::string& out) {
    std::vector<std::string> cols;
    std::string cur;
    for (char ch : columns) {
        if (ch == ',') {
            if (!cur.empty()) cols.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) cols.push_back(cur);
    hmim::plot_csvs(csvs, cols, out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid masked-image-modeling pre-training for 3-d volumes"};
    app.set_version_flag("--version", std::string("hmim ") + kVersion);
    app.require_subcommand(1);

    std::string config_path, out_dir, init = "scratch", resume, volume_path, out_prefix, columns, out_file;
    std::vector<std::string> overrides, csvs;
    uint64_t seed = 0;
    int64_t steps = 0;
    int sub_volume = 16, threads = 1;
    double ratio = 0.4;

    auto add_common = [&](CLI::App* sub, bool with_config) {
        if (with_config) sub->add_option("--config", config_path, "config file (key = value lines)");
        sub->add_option("--seed", seed, "run seed");
        sub->add_option("--out-dir", out_dir, "output directory (default $HMIM_OUT_DIR or ./out)");
        sub->add_option("--override", overrides, "config override key=value (repeatable)");
        sub->add_option("--device-threads", threads, "worker threads for convolution")
            ->check(CLI::Range(1, 64));
    };

    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic phantom dataset");
    add_common(gen, true);

    CLI::App* pre = app.add_subcommand("pretrain", "run self-supervised pre-training");
    add_common(pre, true);
    pre->add_option("--steps", steps, "override run.steps");
    pre->add_option("--resume", resume, "checkpoint to resume from");

    CLI::App* fin = app.add_subcommand("finetune", "fine-tune for segmentation");
    add_common(fin, true);
    fin->add_option("--init", init, "checkpoint path or 'scratch'");

    CLI::App* prev = app.add_subcommand("mask-preview", "mask a volume and render slice panels");
    prev->add_option("--volume", volume_path, "input volume (.hmim)")->required();
    prev->add_option("--sub-volume", sub_volume, "first-level sub-volume side");
    prev->add_option("--ratio", ratio, "mask ratio");
    prev->add_option("--seed", seed, "plan seed");
    prev->add_option("--out", out_prefix, "output path prefix")->required();

    CLI::App* plot = app.add_subcommand("plot", "render CSV columns as a static SVG");
    plot->add_option("--csv", csvs, "input CSV (repeatable for overlays)")->required();
    plot->add_option("--columns", columns, "comma-separated column names")->required();
    plot->add_option("--out", out_file, "output SVG path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    hmim::device_threads() = threads;
    try {
        if (gen->parsed()) return cmd_gen_data(config_path, overrides, out_dir, seed);
        if (pre->parsed()) return cmd_pretrain(config_path, overrides, out_dir, seed, steps, resume);
        if (fin->parsed()) return cmd_finetune(config_path, overrides, out_dir, seed, init);
        if (prev->parsed()) return cmd_mask_preview(volume_path, sub_volume, ratio, seed, out_prefix);
        if (plot->parsed()) return cmd_plot(csvs, columns, out_file);
    } catch (const hmim::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
