#include "gprxv/cli.hpp"

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "gprxv/eval.hpp"
#include "gprxv/gateway/service.hpp"
#include "gprxv/pipeline.hpp"
#include "gprxv/synth.hpp"

namespace gprxv {

namespace fs = std::filesystem;

namespace {

struct CliError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw CliError("cannot write " + p.string() + ": " + std::strerror(errno));
    os << text;
    if (!os) throw CliError("short write to " + p.string());
}

fs::path truth_path_for(const fs::path& volume)
{
    fs::path p = volume;
    p.replace_extension(".gt.jsonl");
    return p;
}

ClassCounts parse_counts(const std::string& s)
{
    ClassCounts c;
    char tail = 0;
    if (std::sscanf(s.c_str(), "%d,%d,%d,%d%c", &c.healthy, &c.void_, &c.loose, &c.manhole, &tail) != 4) {
        throw CliError("--counts expects healthy,void,loose,manhole (got '" + s + "')");
    }
    return c;
}

struct Options {
    std::uint64_t seed = 0;
    std::string out, volume, detections, findings, truth, view, counts = "1,1,1,1", config, json_out;
    int index = 0;
    int workers = 2;
    int port = 8080;
    std::string data_dir, host = "127.0.0.1";
    double iou_thresh = 0.3;
    PipelineConfig cfg;
};

void add_pipeline_flags(CLI::App* sub, Options& o)
{
    sub->add_option("--config", o.config, "pipeline config file (JSON); flags below override it");
    sub->add_option("--window-len", o.cfg.window.length_traces, "sliding window length in traces");
    sub->add_option("--window-stride", o.cfg.window.stride_traces, "sliding window stride in traces");
}

void add_fusion_flags(CLI::App* sub, Options& o)
{
    sub->add_option("--tau-h", o.cfg.thresholds.healthy_veto, "healthy veto score");
    sub->add_option("--tau-m", o.cfg.thresholds.manhole, "manhole score");
    sub->add_option("--tau-assoc", o.cfg.thresholds.assoc, "volumetric IoU for association");
}

// Applies --config first, then re-applies any flag given explicitly.
PipelineConfig effective_config(const CLI::App* sub, const Options& o)
{
    if (o.config.empty()) return o.cfg;
    std::ifstream is(o.config);
    if (!is) throw CliError("cannot open " + o.config + ": " + std::strerror(errno));
    std::stringstream ss;
    ss << is.rdbuf();
    PipelineConfig cfg = PipelineConfig::from_json(ss.str());
    auto given = [&](const char* name) {
        const auto* opt = sub->get_option_no_throw(name);
        return opt && opt->count() > 0;
    };
    if (given("--window-len")) cfg.window.length_traces = o.cfg.window.length_traces;
    if (given("--window-stride")) cfg.window.stride_traces = o.cfg.window.stride_traces;
    if (given("--tau-h")) cfg.thresholds.healthy_veto = o.cfg.thresholds.healthy_veto;
    if (given("--tau-m")) cfg.thresholds.manhole = o.cfg.thresholds.manhole;
    if (given("--tau-assoc")) cfg.thresholds.assoc = o.cfg.thresholds.assoc;
    return cfg;
}

int cmd_synth(const Options& o, std::ostream& out)
{
    const fs::path dir = o.out;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw CliError("cannot create output directory " + dir.string());
    const auto specs = benchmark_specs(o.seed, parse_counts(o.counts));
    for (std::size_t i = 0; i < specs.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "scene-%03zu", i);
        const Scene s = render_scene(specs[i]);
        save_volume(dir / (std::string(stem) + ".gpr"), s.volume);
        save_truth(dir / (std::string(stem) + ".gt.jsonl"), s.truth);
        out << stem << ' ' << (s.truth.empty() ? "healthy" : std::string(to_string(s.truth.front().kind))) << '\n';
    }
    return 0;
}

int cmd_slice(const Options& o, std::ostream& out)
{
    const Volume v = load_volume(o.volume);
    View view;
    try {
        view = view_from_string(o.view);
    } catch (const std::exception&) {
        throw CliError("--view must be B, C or D");
    }
    SliceImage img;
    try {
        img = view == View::B ? b_scan(v, o.index) : view == View::C ? c_scan(v, o.index) : d_scan(v, o.index);
    } catch (const std::exception& e) {
        throw CliError(std::string("--index: ") + e.what());
    }
    const fs::path target = o.out;
    if (target.extension() != ".csv" && target.extension() != ".png") {
        throw CliError("--out must end in .png or .csv");
    }
    if (target.extension() == ".csv") {
        std::ostringstream os;
        const Eigen::IOFormat csv(Eigen::FullPrecision, Eigen::DontAlignCols, ",", "\n");
        os << img.pixels.format(csv) << '\n';
        write_text(target, os.str());
    } else {
        write_text(target, encode_png_gray(img.pixels));
    }
    const auto [rows, cols] = img.axis_labels();
    out << to_string(view) << ' ' << o.index << ": " << img.pixels.rows() << ' ' << rows << " x " << img.pixels.cols()
        << ' ' << cols << '\n';
    return 0;
}

int cmd_detect(const CLI::App* sub, const Options& o, std::ostream& out)
{
    const Volume v = load_volume(o.volume);
    const PipelineConfig cfg = effective_config(sub, o);
    const auto dets = detect_volume(v, cfg);
    export_detections(dets, o.out);
    out << dets.size() << " detections\n";
    return 0;
}

int cmd_fuse(const CLI::App* sub, const Options& o, std::ostream& out)
{
    const PipelineConfig cfg = effective_config(sub, o);
    const auto dets = import_detections(o.detections);
    std::optional<Dims> dims;
    if (!o.volume.empty()) dims = load_volume(o.volume).dims();
    const auto findings = cross_verify(dets, cfg.thresholds, dims);
    export_findings(findings, o.out);
    out << findings.size() << " findings\n";
    return 0;
}

// One evaluation unit: a truth file plus findings and/or detections.
struct EvalItem {
    fs::path truth, findings, detections, volume;
};

std::vector<EvalItem> eval_items(const Options& o)
{
    std::vector<EvalItem> items;
    const fs::path input = !o.detections.empty() ? fs::path(o.detections) : fs::path(o.findings);
    if (fs::is_directory(input)) {
        if (o.volume.empty() || !fs::is_directory(o.volume)) {
            throw CliError("directory evaluation needs --volume pointing at the directory of volumes and truth files");
        }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(input)) {
            if (e.path().extension() == ".jsonl") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string stem = f.stem().string();
            EvalItem it;
            it.volume = fs::path(o.volume) / (stem + ".gpr");
            it.truth = fs::path(o.volume) / (stem + ".gt.jsonl");
            (o.detections.empty() ? it.findings : it.detections) = f;
            if (!fs::exists(it.truth)) throw CliError("no truth file " + it.truth.string() + " for " + f.string());
            items.push_back(it);
        }
        if (items.empty()) throw CliError("no .jsonl files in " + input.string());
        return items;
    }
    EvalItem it;
    it.findings = o.findings;
    it.detections = o.detections;
    if (!o.truth.empty()) {
        it.truth = o.truth;
    } else if (!o.volume.empty()) {
        it.truth = truth_path_for(o.volume);
    } else {
        throw CliError("eval needs --truth or --volume to locate ground truth");
    }
    if (!o.volume.empty()) it.volume = o.volume;
    items.push_back(it);
    return items;
}

int cmd_eval(const CLI::App* sub, const Options& o, std::ostream& out)
{
    if (o.findings.empty() && o.detections.empty()) throw CliError("eval needs --findings or --detections");
    if (!(o.iou_thresh > 0.0 && o.iou_thresh <= 1.0)) throw CliError("--iou-thresh must be in (0, 1]");
    const PipelineConfig cfg = effective_config(sub, o);
    std::vector<MetricsReport> staged;
    MetricsReport mb{"model_B", {}}, mc{"model_C", {}}, md{"model_D", {}};
    bool have_models = false;
    for (const auto& it : eval_items(o)) {
        const GroundTruth gt = load_truth(it.truth);
        if (!it.detections.empty()) {
            const auto dets = import_detections(it.detections);
            std::optional<Dims> dims;
            if (!it.volume.empty() && fs::exists(it.volume)) dims = load_volume(it.volume).dims();
            const auto trace = cross_verify_trace(dets, cfg.thresholds, dims);
            accumulate(staged, staged_metrics(trace, gt, o.iou_thresh));
            mc += evaluate_view_detections(dets, gt, View::C);
            mb += evaluate_view_detections(dets, gt, View::B);
            md += evaluate_view_detections(dets, gt, View::D);
            have_models = true;
        } else {
            accumulate(staged, {evaluate_findings(import_findings(it.findings), gt, o.iou_thresh)});
        }
    }
    std::vector<MetricsReport> all;
    if (have_models) {
        for (auto* m : {&mc, &mb, &md}) all.push_back(*m);
    }
    all.insert(all.end(), staged.begin(), staged.end());
    out << report_table(all);
    if (!o.json_out.empty()) write_text(o.json_out, report_json(all) + "\n");
    return 0;
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const Options& o, std::ostream& out)
{
    if (o.data_dir.empty()) throw CliError("--data-dir is required");
    Service svc({o.data_dir, o.workers});
    const int port = svc.bind(o.host, o.port);
    if (port < 0) throw CliError("cannot bind " + o.host + ":" + std::to_string(o.port));
    out << "listening on http://" << o.host << ':' << port << "/api/v1" << std::endl;
    std::thread stopper([&] {
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
        svc.stop();
    });
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    svc.run();
    g_stop = 1;
    stopper.join();
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"GPR multi-view cross-verification", args.empty() ? "gprxv" : args.front()};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark");
    synth->add_option("--seed", o.seed, "benchmark seed")->required();
    synth->add_option("--out", o.out, "output directory")->required();
    synth->add_option("--counts", o.counts, "healthy,void,loose,manhole volumes");

    auto* slice = app.add_subcommand("slice", "extract one B, C or D section");
    slice->add_option("--volume", o.volume, "volume container")->required()->check(CLI::ExistingFile);
    slice->add_option("--view", o.view, "B, C or D")->required();
    slice->add_option("--index", o.index, "channel (B), sample (C) or trace (D)")->required();
    slice->add_option("--out", o.out, "output .png or .csv")->required();

    auto* detect = app.add_subcommand("detect", "run the per-view rule detectors");
    detect->add_option("--volume", o.volume, "volume container")->required()->check(CLI::ExistingFile);
    detect->add_option("--out", o.out, "detections file")->required();
    add_pipeline_flags(detect, o);

    auto* fuse = app.add_subcommand("fuse", "cross-verify detections into findings");
    fuse->add_option("--detections", o.detections, "detections file")->required()->check(CLI::ExistingFile);
    fuse->add_option("--out", o.out, "findings file")->required();
    fuse->add_option("--volume", o.volume, "volume, to clamp footprints to its bounds")->check(CLI::ExistingFile);
    fuse->add_option("--config", o.config, "pipeline config file (JSON)");
    add_fusion_flags(fuse, o);

    auto* eval = app.add_subcommand("eval", "precision and recall against ground truth");
    eval->add_option("--findings", o.findings, "findings file or directory")->check(CLI::ExistingPath);
    eval->add_option("--detections", o.detections, "detections file or directory (adds staged rows)")
        ->check(CLI::ExistingPath);
    eval->add_option("--volume", o.volume, "volume file or directory holding <stem>.gt.jsonl")
        ->check(CLI::ExistingPath);
    eval->add_option("--truth", o.truth, "ground-truth file")->check(CLI::ExistingFile);
    eval->add_option("--iou-thresh", o.iou_thresh, "volumetric IoU for a match");
    eval->add_option("--json", o.json_out, "also write the report as JSON");
    eval->add_option("--config", o.config, "pipeline config file (JSON)");
    add_fusion_flags(eval, o);

    auto* serve = app.add_subcommand("serve", "run the HTTP service");
    serve->add_option("--port", o.port, "TCP port (0 picks a free one)");
    serve->add_option("--data-dir", o.data_dir, "persistent store")->required();
    serve->add_option("--host", o.host, "bind address");
    serve->add_option("--workers", o.workers, "pipeline worker threads");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    if (argv.empty()) argv.push_back("gprxv");
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        if (*synth) return cmd_synth(o, out);
        if (*slice) return cmd_slice(o, out);
        if (*detect) return cmd_detect(detect, o, out);
        if (*fuse) return cmd_fuse(fuse, o, out);
        if (*eval) return cmd_eval(eval, o, out);
        if (*serve) return cmd_serve(o, out);
    } catch (const std::exception& e) {
        err << "gprxv: error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}

}  // namespace gprxv
