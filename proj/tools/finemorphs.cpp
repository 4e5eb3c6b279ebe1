#include "finemorphs/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv)
{
    using namespace finemorphs::cli;

    CLI::App app{"finemorphs: regression with affine and diffeomorphic module sequences"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "train a model from a config and a dataset CSV");
    t->add_option("config", train.config, "JSON run configuration")->required();
    t->add_option("--data", train.data, "training CSV (responses in the last d_Y columns)")->required();
    t->add_option("--out", train.out, "model file to write")->required();
    t->add_flag("-v,--verbose", train.verbose, "print per-loop progress to stderr");

    PredictArgs pred;
    std::string pred_targets;
    auto* p = app.add_subcommand("predict", "predict with a saved model");
    p->add_option("--model", pred.model, "model file")->required();
    p->add_option("--data", pred.data, "predictor CSV")->required();
    p->add_option("--out", pred.out, "predictions CSV to write")->required();
    p->add_option("--targets", pred_targets, "response CSV; prints the test RMSE");

    GenSplitsArgs gen;
    auto* g = app.add_subcommand("gen-splits", "write seeded train/test split files");
    g->add_option("--data", gen.data, "dataset CSV")->required();
    g->add_option("--kind", gen.kind, "standard or gap");
    g->add_option("--count", gen.count, "number of standard splits");
    g->add_option("--seed", gen.seed, "shuffle seed");
    g->add_option("--d-y", gen.d_y, "number of response columns");
    g->add_option("--out", gen.out, "output directory")->required();

    BenchmarkArgs bench;
    std::string bench_baseline, bench_name;
    auto* b = app.add_subcommand("benchmark", "mean test RMSE and standard error over splits");
    b->add_option("--data", bench.data, "dataset CSV")->required();
    b->add_option("--splits", bench.splits, "directory of split files")->required();
    b->add_option("--config", bench.config, "JSON run configuration")->required();
    b->add_option("--baseline", bench_baseline, "also evaluate a baseline (ridge)");
    b->add_option("--parallel-splits", bench.parallel_splits, "splits trained concurrently");
    b->add_option("--name", bench_name, "dataset label for the output rows");
    b->add_flag("-v,--verbose", bench.verbose, "print per-split results to stderr");

    ExportPcaArgs pca;
    auto* e = app.add_subcommand("export-pca", "PCA snapshots of states inside a D module");
    e->add_option("--model", pca.model, "model file")->required();
    e->add_option("--data", pca.data, "data CSV")->required();
    e->add_option("--module", pca.module, "1-based D module index");
    e->add_option("--times", pca.times, "times in [0, 1]")->required()->delimiter(',');
    e->add_option("--out", pca.out, "snapshot CSV to write")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return kExitValidation;
    }

    if (*t) return cmd_train(train, std::cout, std::cerr);
    if (*p) {
        if (!pred_targets.empty()) pred.targets = pred_targets;
        return cmd_predict(pred, std::cout, std::cerr);
    }
    if (*g) return cmd_gen_splits(gen, std::cout, std::cerr);
    if (*b) {
        if (!bench_baseline.empty()) bench.baseline = bench_baseline;
        if (!bench_name.empty()) bench.name = bench_name;
        return cmd_benchmark(bench, std::cout, std::cerr);
    }
    return cmd_export_pca(pca, std::cout, std::cerr);
}
