// SPDX-License-Identifier: Apache-2.0
//
// ders: pipeline driver.
//   ders <subcommand> --config PATH [--out DIR] [--checkpoint PATH] [flags]
// Exit codes: 0 success, 2 config error, 3 state error, 4 numeric error,
// 1 anything else.

#include <iostream>

#include "CLI11.hpp"

#include "ders/pipeline.hpp"

namespace {

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ders::ConfigError*>(&e) || dynamic_cast<const ders::ParameterError*>(&e)) return 2;
  if (dynamic_cast<const ders::NumericError*>(&e)) return 4;
  if (dynamic_cast<const ders::StateError*>(&e) || dynamic_cast<const ders::CorruptionError*>(&e) ||
      dynamic_cast<const ders::VersionError*>(&e) || dynamic_cast<const ders::DimensionError*>(&e))
    return 3;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeRS upcycling and compression pipeline"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  std::string checkpoint;
  std::string format = "json";
  std::string method;
  std::uint64_t seed = 0;
  double drop_rate = 0.0;
  unsigned bit_width = 0;
  std::size_t rank = 0;
  bool extended = false;
  bool freeze_shared = false;

  std::vector<CLI::Option*> seed_opts, method_opts, drop_opts, bit_opts, rank_opts;
  for (const auto& name : ders::subcommand_names()) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory (default: config output.dir, else ./out)");
    sub->add_option("--checkpoint", checkpoint, "input checkpoint (default: stage artifact in --out)");
    sub->add_option("--format", format, "report format")->check(CLI::IsMember({"csv", "json"}));
    seed_opts.push_back(sub->add_option("--seed", seed, "override the stage seed"));
    method_opts.push_back(sub->add_option("--method", method, "upcycling method")
                              ->check(CLI::IsMember({"vanilla", "ders-sm", "ders-lm"})));
    drop_opts.push_back(sub->add_option("--drop-rate", drop_rate, "drop rate p"));
    bit_opts.push_back(sub->add_option("--bit-width", bit_width, "quantisation bit width k"));
    rank_opts.push_back(sub->add_option("--rank", rank, "low-rank delta rank r"));
    sub->add_flag("--extended", extended, "treat the universal FFN as an extra group member");
    sub->add_flag("--freeze-shared", freeze_shared, "freeze the shared base during training");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string sub = app.get_subcommands().front()->get_name();
  auto given = [](const std::vector<CLI::Option*>& opts) {
    for (auto* o : opts)
      if (o->count() > 0) return true;
    return false;
  };

  try {
    ders::RunOptions opts;
    opts.out_dir = out_dir;
    if (!checkpoint.empty()) opts.checkpoint = checkpoint;
    opts.format = format == "csv" ? ders::ReportFormat::csv : ders::ReportFormat::json;
    if (given(seed_opts)) opts.seed = seed;
    if (given(method_opts)) opts.method = ders::parse_method(method);
    if (given(drop_opts)) opts.drop_rate = drop_rate;
    if (given(bit_opts)) opts.bit_width = bit_width;
    if (given(rank_opts)) opts.rank = rank;
    opts.extended = extended;
    opts.freeze_shared = freeze_shared;

    ders::Pipeline pipeline(ders::load_config(config_path), opts, std::cout);
    pipeline.run(sub);
  } catch (const std::exception& e) {
    std::cerr << "ders " << sub << ": error: " << e.what() << "\n";
    return exit_code(e);
  }
  return 0;
}
