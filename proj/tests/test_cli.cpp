#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "sfuda/report_io.hpp"

namespace fs = std::filesystem;

namespace {

const std::string cli = SFUDA_CLI_PATH;

int run_cli(const std::string& args) {
    const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

struct Workspace {
    fs::path root;
    Workspace() : root(fs::temp_directory_path() / "sfuda_cli_test") {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Workspace() { fs::remove_all(root); }
    std::string path(const std::string& name) const { return (root / name).string(); }
};

const std::string kTinyData =
    "--image-size 16 --classes 3 --n-train 8 --n-val 2 --seed 7";

}  // namespace

TEST_CASE("gen-data: reproducible, split default, refusal without --force") {
    Workspace ws;
    REQUIRE(run_cli("gen-data --out " + ws.path("d1") + " " + kTinyData) == 0);
    REQUIRE(run_cli("gen-data --out " + ws.path("d2") + " " + kTinyData) == 0);

    CHECK(slurp(ws.root / "d1/meta.json") == slurp(ws.root / "d2/meta.json"));
    CHECK(slurp(ws.root / "d1/images/0000.png") == slurp(ws.root / "d2/images/0000.png"));
    CHECK(slurp(ws.root / "d1/masks/0011.png") == slurp(ws.root / "d2/masks/0011.png"));
    CHECK(fs::exists(ws.root / "d1/manifest.json"));

    // Non-empty output dir without --force is refused (I/O error).
    CHECK(run_cli("gen-data --out " + ws.path("d1") + " " + kTinyData) == 3);
    CHECK(run_cli("gen-data --out " + ws.path("d1") + " --force " + kTinyData) == 0);

    // 4:1 split default: 12 train -> 3 val per domain = 30 images total.
    REQUIRE(run_cli("gen-data --out " + ws.path("d3") +
                    " --image-size 16 --n-train 12 --seed 1") == 0);
    int count = 0;
    for (auto& e : fs::directory_iterator(ws.root / "d3/images")) {
        (void)e;
        ++count;
    }
    CHECK(count == 2 * (12 + 3));

    CHECK(run_cli("gen-data --out " + ws.path("d4") + " --shift wobble:1 --seed 1") == 2);
}

TEST_CASE("train-source and adapt: end-to-end tiny run") {
    Workspace ws;
    REQUIRE(run_cli("gen-data --out " + ws.path("data") + " " + kTinyData) == 0);

    // Missing dataset -> I/O error exit code.
    CHECK(run_cli("train-source --data " + ws.path("missing") + " --out " + ws.path("r0") +
                  " --epochs 1 --arch 4,8") == 3);

    // Zero epochs: snapshot of the initialized model is still written.
    REQUIRE(run_cli("train-source --data " + ws.path("data") + " --out " + ws.path("r_init") +
                    " --epochs 0 --arch 4,8 --seed 3") == 0);
    CHECK(fs::exists(ws.root / "r_init/best.snap"));

    REQUIRE(run_cli("train-source --data " + ws.path("data") + " --out " + ws.path("r1") +
                    " --epochs 2 --arch 4,8 --seed 3") == 0);
    CHECK(fs::exists(ws.root / "r1/history.csv"));
    CHECK(fs::exists(ws.root / "r1/manifest.json"));

    // Same seed reproduces the history byte-for-byte.
    REQUIRE(run_cli("train-source --data " + ws.path("data") + " --out " + ws.path("r2") +
                    " --epochs 2 --arch 4,8 --seed 3") == 0);
    CHECK(slurp(ws.root / "r1/history.csv") == slurp(ws.root / "r2/history.csv"));

    const std::string snap = ws.path("r1/best.snap");

    // Contradictory flags are a config error naming the constraint.
    CHECK(run_cli("adapt --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                  ws.path("a0") + " --ei --entropy min --epochs 1") == 2);

    REQUIRE(run_cli("adapt --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                    ws.path("a1") + " --method fairld --wc --ei --epochs 2 --seed 5 --plot "
                    "--dump-overlays 2") == 0);
    CHECK(fs::exists(ws.root / "a1/records.jsonl"));
    CHECK(fs::exists(ws.root / "a1/report.json"));
    CHECK(fs::exists(ws.root / "a1/config.json"));
    CHECK(fs::exists(ws.root / "a1/series.csv"));
    CHECK(fs::exists(ws.root / "a1/dice_curve.svg"));
    CHECK(fs::exists(ws.root / "a1/overlays/0001.png"));
    CHECK(fs::exists(ws.root / "a1/snapshots/epoch001.snap"));
    CHECK(fs::exists(ws.root / "a1/snapshots/best.snap"));

    const auto records = sfuda::read_records_jsonl((ws.root / "a1/records.jsonl").string());
    REQUIRE(records.size() == 2);
    CHECK(records[0].epoch == 1);
    CHECK(records[0].target_val_dice >= 0.0);

    // Default probe columns; then a restricted probe list.
    const std::string head1 = slurp(ws.root / "a1/probe_table.csv");
    CHECK(head1.find("epoch_1,epoch_2,epoch_3,epoch_5,epoch_10,epoch_20,epoch_50") !=
          std::string::npos);
    REQUIRE(run_cli("adapt --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                    ws.path("a2") + " --epochs 2 --seed 5 --probe 1,2") == 0);
    const std::string head2 = slurp(ws.root / "a2/probe_table.csv");
    CHECK(head2.find("epoch_1,epoch_2,best,best_epoch") != std::string::npos);
    CHECK(head2.find("epoch_50") == std::string::npos);

    // The full config round-trips through config.json.
    const auto cfg = sfuda::adaptation_config_from_json(slurp(ws.root / "a1/config.json"));
    CHECK(cfg.use_wc);
    CHECK(cfg.use_ei);
    CHECK(cfg.epochs == 2);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.learning_rate == 3e-5);
    CHECK(cfg.weight_decay == 3e-5);
}

TEST_CASE("ablation: grid CSV shape and single-cell consistency with adapt") {
    Workspace ws;
    REQUIRE(run_cli("gen-data --out " + ws.path("data") + " " + kTinyData) == 0);
    REQUIRE(run_cli("train-source --data " + ws.path("data") + " --out " + ws.path("src") +
                    " --epochs 1 --arch 4,8 --seed 3") == 0);
    const std::string snap = ws.path("src/best.snap");

    REQUIRE(run_cli("ablation --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                    ws.path("ab") + " --groups A,B,C,D --epochs 1 --seed 5 --jobs 2") == 0);
    const std::string csv = slurp(ws.root / "ab/ablation.csv");
    int lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 5);  // header + 4 cells
    CHECK(csv.find("FAILED") == std::string::npos);
    CHECK(csv.find("group,method,entropy,wc,epoch_50,epoch_200,best,best_epoch,status") == 0);

    // A single-cell grid reproduces cmd_adapt's report for the same config.
    REQUIRE(run_cli("ablation --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                    ws.path("ab_one") + " --groups D --epochs 2 --seed 5 --wc-coef 0.01") == 0);
    REQUIRE(run_cli("adapt --data " + ws.path("data") + " --snapshot " + snap + " --out " +
                    ws.path("ad_one") + " --method fairld --wc --ei --wc-coef 0.01 --epochs 2 "
                    "--seed 5") == 0);
    CHECK(slurp(ws.root / "ab_one/fairld_D/report.json") == slurp(ws.root / "ad_one/report.json"));
}
