#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cardnet/cli.hpp"
#include "cardnet/config.hpp"
#include "cardnet/model.hpp"

using namespace cardnet;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

Result cli(std::vector<std::string> args, const std::string& input = "") {
  args.insert(args.begin(), "cardnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::istringstream in(input);
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(int(argv.size()), argv.data(), in, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Scratch directory removed at scope exit.
struct Scratch {
  fs::path dir;
  Scratch() {
    dir = fs::temp_directory_path() /
          ("cardnet_cli_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string write(const std::string& name, const std::string& text) const {
    const fs::path p = dir / name;
    std::ofstream(p) << text;
    return p.string();
  }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// key=value fields of a tab-separated record.
std::map<std::string, std::string> fields(const std::string& line) {
  std::map<std::string, std::string> f;
  std::istringstream in(line);
  std::string kv;
  while (std::getline(in, kv, '\t')) {
    const auto eq = kv.find('=');
    if (eq != std::string::npos) {
      std::string v = kv.substr(eq + 1);
      if (!v.empty() && v.back() == '\n') v.pop_back();
      f[kv.substr(0, eq)] = v;
    }
  }
  return f;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

const char* kSmallConfig = R"(# tiny synthetic run
seed = 5
data.synthetic = true
synthetic.examples = 80
synthetic.labels = 6
synthetic.features = 15
synthetic.min_words = 2
synthetic.max_words = 9
synthetic.min_card = 1
synthetic.max_card = 3
model.hidden_feature = 4
model.feature_dim = 4
model.hidden_global = 4
model.hidden_card = 4
inference.steps = 3
inference.step_size = 0.05
optim.epochs = 2
optim.batch_size = 16
optim.learning_rate = 0.05
)";

}  // namespace

TEST_CASE("config parsing and canonical form") {
  std::istringstream in(kSmallConfig);
  const RunConfig cfg = parse_config(in);
  CHECK(cfg.seed == 5);
  CHECK(cfg.synthetic.labels == 6);
  CHECK(cfg.inference.steps == 3);
  const std::string canon = cfg.serialize();
  std::istringstream again(canon);
  CHECK(parse_config(again).serialize() == canon);
  // Every key appears once, sorted, defaults included.
  const auto ls = lines(canon);
  CHECK(ls.size() == RunConfig::keys().size());
  CHECK(std::is_sorted(ls.begin(), ls.end()));
  CHECK(canon.find("inference.dykstra_rounds = 2\n") != std::string::npos);

  std::istringstream defaults("");
  std::istringstream d2(RunConfig{}.serialize());
  CHECK(parse_config(defaults).serialize() == parse_config(d2).serialize());
}

TEST_CASE("config errors name the field") {
  auto field_of = [](const std::string& text) -> std::string {
    try {
      std::istringstream in(text);
      parse_config(in).validate();
    } catch (const ConfigError& e) {
      return e.field();
    }
    return "";
  };
  CHECK(field_of("bogus.key = 1\n") == "bogus.key");
  CHECK(field_of("inference.steps = many\n") == "inference.steps");
  CHECK(field_of("inference.steps = 3x\n") == "inference.steps");
  CHECK(field_of("inference.variant = magic\n") == "inference.variant");
  CHECK(field_of("data.synthetic = true\ninference.momentum = 1.5\n") == "inference.momentum");
  CHECK(field_of("data.synthetic = true\noptim.batch_size = 0\n") == "optim.batch_size");
  CHECK(field_of("data.synthetic = true\nloss.aux_weight = -1\n") == "loss.aux_weight");
  CHECK(field_of("just a line\n") != "");
  CHECK(field_of("") == "data.train");

  RunConfig cfg;
  CHECK_THROWS_AS(apply_overrides(cfg, {"novalue"}), ConfigError);
  apply_overrides(cfg, {"inference.steps=7", "inference.z_source=fixed:2"});
  CHECK(cfg.inference.steps == 7);
  CHECK(cfg.inference.z_source.fixed);
}

TEST_CASE("usage errors") {
  CHECK(cli({}).code == exit_usage);
  CHECK(cli({"frobnicate"}).code == exit_usage);
  CHECK(cli({"project"}).code == exit_usage);
  CHECK(cli({"--help"}).code == exit_ok);

  Scratch s;
  const Result r = cli({"train", "-c", s.write("empty.cfg", "output.checkpoint = x\n")});
  CHECK(r.code == exit_usage);
  CHECK(r.err.find("data.train") != std::string::npos);
  const Result no_ckpt = cli({"train", "-c", s.write("nockpt.cfg", kSmallConfig)});
  CHECK(no_ckpt.code == exit_usage);
  CHECK(no_ckpt.err.find("output.checkpoint") != std::string::npos);
}

TEST_CASE("project subcommand") {
  Result r = cli({"project", "--op", "capped", "--z", "2"}, "1.5 0.8 -0.2\n");
  CHECK(r.code == exit_ok);
  CHECK(r.out == "1 1 0\n");

  r = cli({"project", "--op", "simplex", "--z", "1"}, "0.5 0.5 0.5\n");
  CHECK(r.code == exit_ok);
  CHECK(r.out == "0.3333333333 0.3333333333 0.3333333333\n");

  r = cli({"project", "--op", "capped", "--z", "5"}, "0.5 0.5 0.5\n0.1 0.2 0.3 0.4 0.5 0.6\n");
  CHECK(r.code == exit_usage);
  CHECK(r.err.find("error: line 1:") != std::string::npos);
  CHECK(r.out == "0.6 0.7 0.8 0.9 1 1\n");  // later lines are still processed

  r = cli({"project", "--op", "dykstra", "--z", "2", "--rounds", "50", "--diagnostics"},
          "1.5 0.8 -0.2\n");
  CHECK(r.code == exit_ok);
  CHECK(r.err.find("residual_sum=") != std::string::npos);

  r = cli({"project", "--op", "fast", "--z", "2", "--sharpness", "50"}, "1.5 0.8 -0.2\n");
  CHECK(r.code == exit_ok);
  CHECK(r.out.size() > 0);

  r = cli({"project", "--op", "matrix", "--z", "1,1"}, "1 0\n0 1\n");
  CHECK(r.code == exit_ok);
  CHECK(r.out == "1 0\n0 1\n");

  r = cli({"project", "--op", "capped", "--z", "1"}, "0.5 x\n");
  CHECK(r.code == exit_usage);
  CHECK(r.err.find("line 1") != std::string::npos);

  CHECK(cli({"project", "--op", "nope", "--z", "1"}, "1 2\n").code == exit_usage);

  Scratch s;
  r = cli({"project", "--op", "simplex", "--z", "1", "--input", s.write("v.txt", "2 1 0.1\n")});
  CHECK(r.out == "1 0 0\n");
}

TEST_CASE("train, checkpoint and eval") {
  Scratch s;
  const std::string cfg_path = s.write("run.cfg", kSmallConfig);
  const std::string ckpt = s.path("model.ckpt");
  const std::string metrics = s.path("metrics.tsv");
  const std::vector<std::string> outputs{"-s", "output.checkpoint=" + ckpt, "-s",
                                         "output.metrics=" + metrics};

  SUBCASE("zero epochs store the initialization") {
    std::vector<std::string> args{"train", "-c", cfg_path, "-s", "optim.epochs=0"};
    args.insert(args.end(), outputs.begin(), outputs.end());
    const Result r = cli(args);
    REQUIRE(r.code == exit_ok);
    const Checkpoint ck = load_checkpoint(ckpt);
    std::istringstream in(kSmallConfig);
    RunConfig cfg = parse_config(in);
    const RunData data = load_run_data(cfg);
    CHECK(ck.model == ScoreModel::initialize(architecture_for(cfg, data.train), cfg.seed));
    CHECK(ck.metadata.at("train.best_epoch") == "0");
    CHECK(ck.metadata.at("config.optim.epochs") == "0");
  }

  SUBCASE("metrics, determinism and eval reproduction") {
    std::vector<std::string> args{"train", "-c", cfg_path};
    args.insert(args.end(), outputs.begin(), outputs.end());
    const Result r = cli(args);
    REQUIRE(r.code == exit_ok);
    CHECK(read_file(metrics) == r.out);
    const std::string first_ckpt = read_file(ckpt);
    const Result again = cli(args);
    CHECK(again.out == r.out);
    CHECK(read_file(ckpt) == first_ckpt);

    std::map<std::string, std::string> final_train, final_dev;
    for (const auto& l : lines(r.out)) {
      auto f = fields(l);
      if (f["split"] == "final-train") final_train = f;
      if (f["split"] == "final-dev") final_dev = f;
    }
    REQUIRE(!final_dev.empty());

    const Result ev = cli({"eval", "--checkpoint", ckpt, "-c", cfg_path, "--split", "train"});
    REQUIRE(ev.code == exit_ok);
    auto e = fields(ev.out);
    CHECK(std::abs(std::stod(e["f1"]) - std::stod(final_train["f1"])) < 1e-6);
    CHECK(e["examples"] == "64");
    for (const char* k : {"loss", "f1_macro", "card_mse", "card_mse_const", "card_mse_rand",
                          "mean_residual_sum", "max_residual_box"}) {
      CHECK(e.count(k) == 1);
    }
    const Result dev = cli({"eval", "--checkpoint", ckpt, "-c", cfg_path, "--split", "dev"});
    CHECK(std::abs(std::stod(fields(dev.out)["f1"]) - std::stod(final_dev["f1"])) < 1e-6);

    const Result topz = cli({"eval", "--checkpoint", ckpt, "-c", cfg_path, "--variant", "topz"});
    CHECK(fields(topz.out)["variant"] == "topz");
    CHECK(std::stod(fields(topz.out)["max_residual_box"]) == 0.0);

    const Result fixed = cli({"eval", "--checkpoint", ckpt, "-c", cfg_path, "--z", "fixed:3"});
    CHECK(fields(fixed.out)["z_source"] == "fixed:3");
    CHECK(std::abs(std::stod(fields(fixed.out)["mean_residual_sum"])) < 0.5);

    // Evaluating a data file directly.
    const std::string data_file = s.write("data.txt", "0,2 1:1 3:1\n4 0:1\n");
    const Result file = cli({"eval", "--checkpoint", ckpt, "--data", data_file});
    CHECK(file.code == exit_ok);
    CHECK(fields(file.out)["examples"] == "2");

    const std::string wide = s.write("wide.txt", "0 40:1\n");
    const Result mismatch = cli({"eval", "--checkpoint", ckpt, "--data", wide});
    CHECK(mismatch.code == exit_usage);
    CHECK(mismatch.err.find("D=15") != std::string::npos);
    CHECK(mismatch.err.find("D=41") != std::string::npos);

    CHECK(cli({"eval", "--checkpoint", ckpt, "-c", cfg_path, "--variant", "sc"}).code == exit_usage);
    CHECK(cli({"eval", "--checkpoint", s.path("missing.ckpt"), "--data", data_file}).code ==
          exit_usage);
  }

  SUBCASE("non-finite inputs abort with the numerical exit code") {
    std::string huge = "1";
    for (int j = 0; j < 8; ++j) huge += " " + std::to_string(j) + ":1.7e308";
    const std::string data = s.write("huge.txt", "0 0:1\n" + huge + "\n0,1 2:1\n");
    const std::string cfg = s.write("huge.cfg", std::string(R"(
data.train = )") + data + R"(
data.dev_fraction = 0
data.test_fraction = 0
model.hidden_feature = 3
model.feature_dim = 3
model.hidden_global = 3
model.hidden_card = 3
optim.epochs = 1
optim.batch_size = 1
)");
    std::vector<std::string> args{"train", "-c", cfg};
    args.insert(args.end(), outputs.begin(), outputs.end());
    const Result r = cli(args);
    CHECK(r.code == exit_numerical);
    CHECK(r.err.find("training example") != std::string::npos);
  }
}

TEST_CASE("gradcheck subcommand") {
  Scratch s;
  const std::string cfg = s.write("g.cfg", R"(
seed = 3
data.synthetic = true
synthetic.examples = 20
synthetic.labels = 5
synthetic.features = 12
synthetic.min_words = 2
synthetic.max_words = 8
synthetic.min_card = 1
synthetic.max_card = 3
model.hidden_feature = 4
model.feature_dim = 4
model.hidden_global = 4
model.hidden_card = 4
inference.steps = 3
)");
  Result r = cli({"gradcheck", "-c", cfg});
  CHECK(r.code == exit_ok);
  const auto ls = lines(r.out);
  REQUIRE(ls.size() == 5);
  CHECK(fields(ls.back())["status"] == "ok");
  CHECK(std::stod(fields(ls.back())["max_rel_error"]) < 1e-3);

  r = cli({"gradcheck", "-c", cfg, "-s", "gradcheck.corrupt_backward=true"});
  CHECK(r.code == exit_check_failed);
  CHECK(fields(lines(r.out).back())["status"] == "FAILED");

  r = cli({"gradcheck", "-c", cfg, "-s", "inference.steps=1", "-s", "inference.variant=unary",
           "-s", "loss.single_step=cross_entropy"});
  CHECK(r.code == exit_ok);
  CHECK(std::stod(fields(lines(r.out).back())["max_rel_error"]) < 1e-6);

  CHECK(cli({"gradcheck", "-c", cfg, "-s", "inference.steps=5"}).code == exit_usage);
  CHECK(cli({"gradcheck", "-c", cfg, "-s", "synthetic.labels=9"}).code == exit_usage);
}
