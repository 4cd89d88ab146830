#include "doctest.h"

#include "hmim/csv.hpp"
#include "hmim/data.hpp"
#include "hmim/masking.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace hmim;
namespace fs = std::filesystem;

namespace {

const std::string kCli = HMIM_CLI_PATH;

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string out_file = "/tmp/hmim_cli_out.txt";
    const std::string cmd = kCli + " " + args + " > " + out_file + " 2>&1";
    const int rc = std::system(cmd.c_str());
    std::ifstream f(out_file);
    std::string output((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return {WEXITSTATUS(rc), output};
}

std::string fresh_dir(const std::string& name) {
    const std::string dir = "/tmp/hmim_cli/" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    f << text;
}

const char* kToyPretrain = R"(
data.source = synthetic
data.count = 4
data.shape = 16
data.seed = 7
grid.sub_volume = 8
grid.patch = 4
model.base_width = 2
model.depth = 2
model.projection_dim = 8
run.steps = 3
run.batch_size = 2
run.seed = 1
optim.warmup_steps = 1
)";

}  // namespace

TEST_CASE("missing config file exits 2 and names the path") {
    auto r = run("pretrain --config /nope/missing.cfg");
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("/nope/missing.cfg") != std::string::npos);
}

TEST_CASE("unknown config key exits 2 and names the key") {
    const std::string dir = fresh_dir("badkey");
    write_file(dir + "/cfg", std::string(kToyPretrain) + "tpyo.key = 3\n");
    auto r = run("pretrain --config " + dir + "/cfg --out-dir " + dir);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("tpyo.key") != std::string::npos);
}

TEST_CASE("unknown subcommand and bad flags exit 2") {
    CHECK(run("frobnicate").exit_code == 2);
    CHECK(run("plot --csv x.csv").exit_code == 2);  // missing required flags
}

TEST_CASE("toy pretrain run writes csv rows, manifest and checkpoint") {
    const std::string dir = fresh_dir("pre");
    write_file(dir + "/cfg", kToyPretrain);
    auto r = run("pretrain --config " + dir + "/cfg --out-dir " + dir);
    CHECK(r.exit_code == 0);
    auto table = read_csv(dir + "/pretrain_metrics.csv");
    CHECK(table.rows.size() == 3);
    CHECK(fs::exists(dir + "/checkpoint_final.hmck"));

    std::ifstream mf(dir + "/manifest.txt");
    std::string manifest((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    CHECK(manifest.find("status: complete") != std::string::npos);
    CHECK(manifest.find("command: pretrain") != std::string::npos);
    // every artifact named in the manifest exists
    for (const std::string key : {"artifact.metrics_csv: ", "artifact.checkpoint: "}) {
        const size_t at = manifest.find(key);
        REQUIRE(at != std::string::npos);
        const size_t end = manifest.find('\n', at);
        const std::string path = manifest.substr(at + key.size(), end - at - key.size());
        CHECK(fs::exists(path));
    }
}

TEST_CASE("steps flag and overrides are honored and echoed in the manifest") {
    const std::string dir = fresh_dir("override");
    write_file(dir + "/cfg", kToyPretrain);
    auto r = run("pretrain --config " + dir + "/cfg --out-dir " + dir +
                 " --steps 2 --override mask.ratio=1.0");
    CHECK(r.exit_code == 0);
    auto table = read_csv(dir + "/pretrain_metrics.csv");
    CHECK(table.rows.size() == 2);
    std::ifstream mf(dir + "/manifest.txt");
    std::string manifest((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    CHECK(manifest.find("config.mask.ratio: 1.0") != std::string::npos);
}

TEST_CASE("identical seeds give byte-identical metrics apart from timing") {
    const std::string da = fresh_dir("rep_a");
    const std::string db = fresh_dir("rep_b");
    write_file(da + "/cfg", kToyPretrain);
    CHECK(run("pretrain --config " + da + "/cfg --out-dir " + da).exit_code == 0);
    CHECK(run("pretrain --config " + da + "/cfg --out-dir " + db).exit_code == 0);
    auto a = read_csv(da + "/pretrain_metrics.csv");
    auto b = read_csv(db + "/pretrain_metrics.csv");
    REQUIRE(a.rows.size() == b.rows.size());
    const int t = a.column_index("step_ms");
    for (size_t i = 0; i < a.rows.size(); ++i)
        for (size_t j = 0; j < a.rows[i].size(); ++j)
            if (static_cast<int>(j) != t) CHECK(a.rows[i][j] == b.rows[i][j]);
}

TEST_CASE("finetune from scratch and from a checkpoint") {
    const std::string dir = fresh_dir("ft");
    write_file(dir + "/cfg", kToyPretrain);
    REQUIRE(run("pretrain --config " + dir + "/cfg --out-dir " + dir).exit_code == 0);

    const std::string ft_cfg = std::string(R"(
data.source = synthetic
data.count = 4
data.val_count = 2
data.shape = 16
data.objects = 2
data.seed = 7
grid.sub_volume = 8
grid.patch = 4
model.base_width = 2
model.depth = 2
model.projection_dim = 8
ft.classes = 3
ft.epochs = 1
run.seed = 2
optim.warmup_steps = 0
)");
    write_file(dir + "/ft.cfg", ft_cfg);

    const std::string ftdir = fresh_dir("ft_scratch");
    auto scratch = run("finetune --config " + dir + "/ft.cfg --out-dir " + ftdir + " --init scratch");
    CHECK(scratch.exit_code == 0);
    CHECK(fs::exists(ftdir + "/finetune_curves.csv"));
    CHECK(fs::exists(ftdir + "/finetune_summary.json"));
    CHECK(scratch.output.find("mean dice") != std::string::npos);

    const std::string ftdir2 = fresh_dir("ft_ckpt");
    auto warm = run("finetune --config " + dir + "/ft.cfg --out-dir " + ftdir2 + " --init " + dir +
                    "/checkpoint_final.hmck");
    CHECK(warm.exit_code == 0);

    auto bad = run("finetune --config " + dir + "/ft.cfg --out-dir " + ftdir2 + " --init /nope.hmck");
    CHECK(bad.exit_code == 2);

    // identical invocations produce identical summary records
    const std::string ftdir3 = fresh_dir("ft_repeat");
    auto again = run("finetune --config " + dir + "/ft.cfg --out-dir " + ftdir3 + " --init scratch");
    CHECK(again.exit_code == 0);
    std::ifstream s1(ftdir + "/finetune_summary.json"), s2(ftdir3 + "/finetune_summary.json");
    std::string j1((std::istreambuf_iterator<char>(s1)), std::istreambuf_iterator<char>());
    std::string j2((std::istreambuf_iterator<char>(s2)), std::istreambuf_iterator<char>());
    CHECK(j1 == j2);
}

TEST_CASE("mask-preview writes the masked volume, plan record and panel image") {
    const std::string dir = fresh_dir("preview");
    // a 64^3 input at the paper-scale grid: exactly 26 of 64 patches masked
    PhantomSpec ps;
    ps.h = ps.w = ps.d = 64;
    ps.seed = 5;
    auto ph = generate_phantom(ps);
    write_volume(dir + "/vol.hmim", ph.image);

    auto r = run("mask-preview --volume " + dir + "/vol.hmim --sub-volume 32 --ratio 0.4 --seed 9 --out " +
                 dir + "/prev");
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(dir + "/prev_masked.hmim"));
    CHECK(fs::exists(dir + "/prev.plan"));
    CHECK(fs::exists(dir + "/prev.pgm"));

    auto plan = read_plan(dir + "/prev.plan");
    CHECK(plan.total_masked() == 26);
    auto masked = read_volume(dir + "/prev_masked.hmim");
    // masked voxels are zero-filled
    int64_t zeros = 0;
    for (float v : masked.values()) zeros += v == 0.0f;
    CHECK(zeros >= 26 * 16 * 16 * 16);

    SUBCASE("ratio zero reproduces the input") {
        auto r0 = run("mask-preview --volume " + dir + "/vol.hmim --sub-volume 32 --ratio 0 --seed 9 --out " +
                      dir + "/zero");
        CHECK(r0.exit_code == 0);
        auto same = read_volume(dir + "/zero_masked.hmim");
        CHECK(same.values() == ph.image.values());
    }
    SUBCASE("same seed gives identical artifacts") {
        auto r1 = run("mask-preview --volume " + dir + "/vol.hmim --sub-volume 32 --ratio 0.4 --seed 9 --out " +
                      dir + "/again");
        CHECK(r1.exit_code == 0);
        std::ifstream f1(dir + "/prev.plan", std::ios::binary), f2(dir + "/again.plan", std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
        std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(b1 == b2);
    }
}

TEST_CASE("plot renders polylines and legends; empty csv exits 2") {
    const std::string dir = fresh_dir("plot");
    write_file(dir + "/a.csv", "step,loss\n0,1.0\n1,0.8\n2,0.7\n3,0.65\n4,0.6\n5,0.58\n6,0.55\n7,0.53\n8,0.52\n9,0.5\n");
    auto r = run("plot --csv " + dir + "/a.csv --columns loss --out " + dir + "/a.svg");
    CHECK(r.exit_code == 0);
    std::ifstream f(dir + "/a.svg");
    std::string svg((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(svg.find("<polyline") != std::string::npos);
    // one polyline with 10 points
    const size_t points_at = svg.find("points=\"");
    REQUIRE(points_at != std::string::npos);
    const std::string pts = svg.substr(points_at + 8, svg.find('"', points_at + 8) - points_at - 8);
    CHECK(std::count(pts.begin(), pts.end(), ',') == 10);

    SUBCASE("two csv overlay carries file-stem legends") {
        write_file(dir + "/scratch.csv", "step,loss\n0,1.2\n1,1.1\n");
        auto r2 = run("plot --csv " + dir + "/a.csv --csv " + dir + "/scratch.csv --columns loss --out " +
                      dir + "/both.svg");
        CHECK(r2.exit_code == 0);
        std::ifstream f2(dir + "/both.svg");
        std::string svg2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
        CHECK(svg2.find("a:loss") != std::string::npos);
        CHECK(svg2.find("scratch:loss") != std::string::npos);
    }
    SUBCASE("empty csv") {
        write_file(dir + "/empty.csv", "step,loss\n");
        auto r3 = run("plot --csv " + dir + "/empty.csv --columns loss --out " + dir + "/e.svg");
        CHECK(r3.exit_code == 2);
    }
    SUBCASE("unknown column") {
        auto r4 = run("plot --csv " + dir + "/a.csv --columns nope --out " + dir + "/n.svg");
        CHECK(r4.exit_code == 2);
        CHECK(r4.output.find("nope") != std::string::npos);
    }
}

TEST_CASE("HMIM_OUT_DIR provides the default output directory") {
    const std::string dir = fresh_dir("envdir");
    write_file(dir + "/cfg", kToyPretrain);
    const std::string cmd = "HMIM_OUT_DIR=" + dir + "/envout " + kCli + " pretrain --config " + dir +
                            "/cfg > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(fs::exists(dir + "/envout/pretrain_metrics.csv"));
}

TEST_CASE("gen-data writes volumes readable through the manifest") {
    const std::string dir = fresh_dir("gen");
    auto r = run("gen-data --out-dir " + dir + " --override data.count=3 --override data.val_count=1 "
                 "--override data.shape=16 --seed 4");
    CHECK(r.exit_code == 0);
    auto entries = read_manifest(dir + "/manifest.txt");
    REQUIRE(entries.size() == 4);
    int train = 0, val = 0;
    for (const auto& e : entries) {
        (e.split == "train" ? train : val) += 1;
        auto vol = read_volume(e.path);
        CHECK(vol.shape() == Shape{1, 16, 16, 16});
        auto labels = read_labels(e.label_path);
        CHECK(labels.h == 16);
    }
    CHECK(train == 3);
    CHECK(val == 1);
}

TEST_CASE("device-threads flag is accepted and produces identical results") {
    const std::string da = fresh_dir("thr_a");
    const std::string db = fresh_dir("thr_b");
    write_file(da + "/cfg", kToyPretrain);
    CHECK(run("pretrain --config " + da + "/cfg --out-dir " + da + " --device-threads 1").exit_code == 0);
    CHECK(run("pretrain --config " + da + "/cfg --out-dir " + db + " --device-threads 3").exit_code == 0);
    auto a = read_csv(da + "/pretrain_metrics.csv");
    auto b = read_csv(db + "/pretrain_metrics.csv");
    const int t = a.column_index("step_ms");
    for (size_t i = 0; i < a.rows.size(); ++i)
        for (size_t j = 0; j < a.rows[i].size(); ++j)
            if (static_cast<int>(j) != t) CHECK(a.rows[i][j] == b.rows[i][j]);
}
