#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "m2m/io.hpp"
#include "m2m/pipeline.hpp"
#include "m2m/train.hpp"

using namespace m2m;
using nlohmann::json;

namespace {

std::vector<float> parse_times(const std::string& s) {
    std::vector<float> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stof(item));
    return out;
}

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
    return out;
}

MrnConfig toy_model_config() {
    MrnConfig cfg;
    cfg.levels = 2;
    cfg.channels = {10, 20};
    cfg.rank = 4;
    cfg.n_flows = 4;
    cfg.flow_downscale = 4;
    return cfg;
}

void paint_holes_magenta(Tensor<float>& img, const HoleMask& holes) {
    const int h = img.shape[1], w = img.shape[2];
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(h) * w; ++i) {
        if (!holes[i]) continue;
        img[i] = 1.0f;                                        // R
        img[static_cast<std::int64_t>(h) * w + i] = 0.0f;     // G
        img[2 * static_cast<std::int64_t>(h) * w + i] = 1.0f; // B
    }
}

int cmd_interpolate(const std::string& frame0, const std::string& frame1,
                    const std::string& flow01, const std::string& flow10,
                    const std::string& times_str, const std::string& model_path,
                    const std::string& out_dir, bool no_fill, int n_flows) {
    MrnModel<float> model = load_checkpoint(model_path);
    InterpolationRequest req;
    req.i0 = read_image(frame0);
    req.i1 = read_image(frame1);
    req.times = parse_times(times_str);
    req.fill = !no_fill;
    req.n_flows_override = n_flows;
    if (!flow01.empty() || !flow10.empty()) {
        require(!flow01.empty() && !flow10.empty(),
                "interpolate: --flow01 and --flow10 must be given together");
        req.f01_ext = read_flo(flow01);
        req.f10_ext = read_flo(flow10);
    }
    std::filesystem::create_directories(out_dir);
    auto res = interpolate(req, model);
    for (std::size_t i = 0; i < res.frames.size(); ++i) {
        if (no_fill) paint_holes_magenta(res.frames[i], res.holes[i]);
        write_image(out_dir + "/frame_t" + std::to_string(i) + ".png", res.frames[i]);
    }
    json ledger;
    ledger["shared_flops"] = res.ledger.shared_flops;
    ledger["unshared_flops"] = res.ledger.unshared_flops;
    ledger["mrn_invocations"] = res.ledger.mrn_invocations;
    ledger["stage_ms"] = res.ledger.stage_ms;
    ledger["hole_counts"] = res.hole_counts;
    std::ofstream(out_dir + "/ledger.json") << ledger.dump(2) << "\n";
    std::cout << "wrote " << res.frames.size() << " frame(s) to " << out_dir << "\n";
    return 0;
}

int cmd_holes(const std::string& frame0, const std::string& frame1, const std::string& model_path,
              const std::string& n_list_str, const std::string& out_csv, const std::string& gt) {
    MrnModel<float> model = load_checkpoint(model_path);
    SweepScene scene;
    scene.i0 = read_image(frame0);
    scene.i1 = read_image(frame1);
    scene.t = 0.5f;
    if (!gt.empty()) {
        scene.gt = read_image(gt);
    } else {
        // without ground truth, score against the model's full-N result
        InterpolationRequest req;
        req.i0 = scene.i0;
        req.i1 = scene.i1;
        req.times = {0.5f};
        scene.gt = interpolate(req, model).frames[0];
    }
    auto rows = sweep_n_flows(model, {scene}, parse_ints(n_list_str));
    std::ofstream csv(out_csv);
    require(bool(csv), "holes: cannot open " + out_csv);
    csv << "n_flows,mean_holes,psnr\n";
    for (const auto& r : rows) csv << r.n_flows << "," << r.mean_holes << "," << r.psnr << "\n";
    std::cout << "wrote " << rows.size() << " row(s) to " << out_csv << "\n";
    return 0;
}

int cmd_train_toy(const std::string& config_path, const std::string& out_ckpt,
                  const std::string& log_csv, unsigned seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    MrnConfig mc = toy_model_config();
    if (!config_path.empty()) {
        std::ifstream f(config_path);
        require(bool(f), "train-toy: cannot open config " + config_path);
        std::string line;
        while (std::getline(f, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            const std::string key = trim(line.substr(0, eq));
            const std::string val = trim(line.substr(eq + 1));
            if (key == "iterations") cfg.iterations = std::stoi(val);
            else if (key == "batch_size") cfg.batch_size = std::stoi(val);
            else if (key == "lr_max") cfg.lr_max = std::stof(val);
            else if (key == "weight_decay") cfg.weight_decay = std::stof(val);
            else if (key == "crop") cfg.crop = std::stoi(val);
            else if (key == "scene_pool") cfg.scene_pool = std::stoi(val);
            else if (key == "augment") cfg.augment = val == "1" || val == "true";
            else if (key == "seed") cfg.seed = static_cast<unsigned>(std::stoul(val));
            else if (key == "log_every") cfg.log_every = std::stoi(val);
            else if (key == "levels") mc.levels = std::stoi(val);
            else if (key == "channels") mc.channels = parse_ints(val);
            else if (key == "rank") mc.rank = std::stoi(val);
            else if (key == "n_flows") mc.n_flows = std::stoi(val);
            else if (key == "flow_downscale") mc.flow_downscale = std::stoi(val);
            else require(false, "train-toy: unknown config key " + key);
        }
    }
    MrnModel<float> model(mc, cfg.seed);
    TrainResult result = train_toy(model, cfg);
    save_checkpoint(out_ckpt, model);
    if (!log_csv.empty()) {
        std::ofstream csv(log_csv);
        require(bool(csv), "train-toy: cannot open " + log_csv);
        csv << "iteration,charbonnier,census,total\n";
        for (const auto& row : result.log)
            csv << row.iteration << "," << row.charbonnier << "," << row.census << ","
                << row.total << "\n";
    }
    std::cout << "holdout loss " << result.initial_holdout_loss << " -> "
              << result.final_holdout_loss << "\n";
    std::cout << "saved " << out_ckpt << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& scope, unsigned seed) {
    std::mt19937 rng(seed);
    auto rand_t = [&](Shape sh, double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        Tensord t(std::move(sh));
        for (auto& v : t.data) v = d(rng);
        return t;
    };
    bool ok = true;
    auto report = [&](const std::string& name, double err, double tol) {
        const bool pass = err < tol;
        ok = ok && pass;
        std::cout << name << ": max rel err " << err << " (tol " << tol << ") "
                  << (pass ? "ok" : "FAIL") << "\n";
    };

    if (scope == "op" || scope == "all") {
        report("conv2d",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.conv2d(in[0], in[1], in[2], 2, 1), in[3]));
                   },
                   {rand_t({2, 5, 5}, -1, 1), rand_t({3, 2, 3, 3}, -1, 1), rand_t({3}, -1, 1),
                    rand_t({3, 3, 3}, -1, 1)}),
               1e-5);
        report("conv_transpose2d",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(
                           t.mul(t.conv_transpose2d(in[0], in[1], in[2], 2, 1), in[3]));
                   },
                   {rand_t({3, 3, 3}, -1, 1), rand_t({3, 2, 4, 4}, -1, 1), rand_t({2}, -1, 1),
                    rand_t({2, 6, 6}, -1, 1)}),
               1e-5);
        report("prelu",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.prelu(in[0], in[1]), in[2]));
                   },
                   {rand_t({2, 4, 4}, -1, 1), rand_t({2}, 0.1, 0.5), rand_t({2, 4, 4}, -1, 1)}),
               1e-5);
        report("sigmoid/exp/mul",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.sigmoid_(in[0]), t.exp_(in[1])));
                   },
                   {rand_t({2, 3, 3}, -2, 2), rand_t({2, 3, 3}, -1, 0.5)}),
               1e-5);
        report("backward_warp",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.backward_warp(in[0], in[1]), in[2]));
                   },
                   {rand_t({2, 5, 5}, 0, 1), rand_t({2, 5, 5}, 0.1, 0.9),
                    rand_t({2, 5, 5}, -1, 1)}),
               1e-4);
        report("splat",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.splat(in[0], in[1], in[2]), in[3]));
                   },
                   {rand_t({2, 5, 5}, 0, 1), rand_t({5, 5}, 0.2, 1.5),
                    rand_t({2, 5, 5}, 0.1, 0.8), rand_t({3, 5, 5}, -1, 1)}),
               1e-4);
        report("kron3/avg_pool",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       auto p = t.avg_pool_axes(in[0], {false, true, true});
                       return t.reduce_sum(t.mul(t.kron3(p, in[1], in[2]), in[3]));
                   },
                   {rand_t({3, 4, 4}, -1, 1), rand_t({1, 4, 1}, -1, 1), rand_t({1, 1, 4}, -1, 1),
                    rand_t({3, 4, 4}, -1, 1)}),
               1e-5);
        report("charbonnier/census",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.add(charbonnier_loss(t, in[0], in[1]),
                                    census_loss(t, in[0], in[1]));
                   },
                   {rand_t({2, 5, 5}, 0, 1), rand_t({2, 5, 5}, 0, 1)}),
               1e-4);
        report("resize_bilinear",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       return t.reduce_sum(t.mul(t.resize_bilinear(in[0], 6, 6), in[1]));
                   },
                   {rand_t({2, 3, 3}, -1, 1), rand_t({2, 6, 6}, -1, 1)}),
               1e-5);
    }
    if (scope == "pipeline" || scope == "all") {
        report("splat->fuse path",
               grad_check(
                   [](Taped& t, const std::vector<Taped::Var>& in) {
                       FusionGraphInputs<double> fin;
                       fin.i0 = in[0];
                       fin.i1 = in[1];
                       fin.flows01 = {in[2]};
                       fin.flows10 = {in[3]};
                       fin.s0 = in[4];
                       fin.s1 = in[5];
                       fin.alpha = in[6];
                       fin.t = 0.5;
                       return t.reduce_sum(t.mul(build_fusion_graph(t, fin), in[7]));
                   },
                   {rand_t({2, 5, 5}, 0.2, 0.8), rand_t({2, 5, 5}, 0.2, 0.8),
                    rand_t({2, 5, 5}, -0.8, 0.8), rand_t({2, 5, 5}, -0.8, 0.8),
                    rand_t({1, 5, 5}, -0.5, 0.5), rand_t({1, 5, 5}, -0.5, 0.5),
                    Tensord({1}, std::vector<double>{1.2}), rand_t({2, 5, 5}, -1, 1)},
                   1e-6),
               1e-4);
    }
    if (scope == "mrn" || scope == "all") {
        MrnConfig cfg;
        cfg.levels = 2;
        cfg.channels = {4, 8};
        cfg.rank = 2;
        cfg.n_flows = 2;
        cfg.flow_downscale = 4;
        MrnModel<double> model(cfg, seed);
        Tensord i0 = rand_t({3, 8, 8}, 0, 1);
        Tensord i1 = rand_t({3, 8, 8}, 0, 1);
        Tensord coarse = rand_t({2, 2, 2}, -0.5, 0.5);

        auto objective = [&](const MrnModel<double>& m) {
            Taped t2;
            MrnForward<double> f2(t2, m);
            auto o = f2.run(t2.leaf(i0), t2.leaf(i1), t2.leaf(coarse), t2.leaf(coarse));
            Taped::Var l = t2.reduce_sum(t2.mul(o.flows01[0], o.flows01[0]));
            l = t2.add(l, t2.reduce_sum(t2.mul(o.s0, o.s0)));
            l = t2.add(l, t2.reduce_sum(o.flows10[1]));
            return l;
        };
        Taped tape;
        MrnForward<double> mrn(tape, model);
        auto out = mrn.run(tape.leaf(i0), tape.leaf(i1), tape.leaf(coarse), tape.leaf(coarse));
        Taped::Var loss = tape.reduce_sum(tape.mul(out.flows01[0], out.flows01[0]));
        loss = tape.add(loss, tape.reduce_sum(tape.mul(out.s0, out.s0)));
        loss = tape.add(loss, tape.reduce_sum(out.flows10[1]));
        tape.backward(loss);
        double max_err = 0;
        const double eps = 1e-5;
        for (std::size_t p = 0; p < model.params.count(); ++p) {
            std::uniform_int_distribution<std::int64_t> d(0, model.params.tensors[p].numel() - 1);
            const std::int64_t i = d(rng);
            MrnModel<double> m = model;
            m.params.tensors[p][i] += eps;
            Taped ta;
            const double fp = [&] {
                Taped t2;
                MrnForward<double> f2(t2, m);
                auto o = f2.run(t2.leaf(i0), t2.leaf(i1), t2.leaf(coarse), t2.leaf(coarse));
                Taped::Var l = t2.reduce_sum(t2.mul(o.flows01[0], o.flows01[0]));
                l = t2.add(l, t2.reduce_sum(t2.mul(o.s0, o.s0)));
                l = t2.add(l, t2.reduce_sum(o.flows10[1]));
                return t2.val(l)[0];
            }();
            m.params.tensors[p][i] -= 2 * eps;
            const double fm = [&] {
                Taped t2;
                MrnForward<double> f2(t2, m);
                auto o = f2.run(t2.leaf(i0), t2.leaf(i1), t2.leaf(coarse), t2.leaf(coarse));
                Taped::Var l = t2.reduce_sum(t2.mul(o.flows01[0], o.flows01[0]));
                l = t2.add(l, t2.reduce_sum(t2.mul(o.s0, o.s0)));
                l = t2.add(l, t2.reduce_sum(o.flows10[1]));
                return t2.val(l)[0];
            }();
            (void)objective;
            const double numeric = (fp - fm) / (2 * eps);
            const double analytic = tape.grad(mrn.param_vars()[p])[i];
            max_err = std::max(max_err,
                               std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)));
        }
        report("mrn weight subset", max_err, 1e-3);
    }
    return ok ? 0 : 2;
}

int cmd_bench(const std::string& size_str, int k, int repeat, unsigned seed) {
    const auto x = size_str.find('x');
    require(x != std::string::npos, "bench: --size expects WxH");
    const int w = std::stoi(size_str.substr(0, x));
    const int h = std::stoi(size_str.substr(x + 1));
    MrnModel<float> model(toy_model_config(), seed);
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Tensor<float> i0({3, h, w}), i1({3, h, w});
    for (auto& v : i0.data) v = d(rng);
    for (auto& v : i1.data) v = d(rng);

    double shared_ms = 0, unshared_ms = 0;
    std::int64_t shared_flops = 0, unshared_flops = 0;
    for (int r = 0; r < repeat; ++r) {
        InterpolationRequest req;
        req.i0 = i0;
        req.i1 = i1;
        for (int i = 1; i <= k; ++i) req.times.push_back(static_cast<float>(i) / (k + 1));
        auto res = interpolate(req, model);
        shared_ms += res.ledger.stage_ms.at("coarse_flow") + res.ledger.stage_ms.at("mrn");
        unshared_ms += res.ledger.stage_ms.at("steps");
        shared_flops = res.ledger.shared_flops;
        unshared_flops = res.ledger.unshared_flops;
    }
    shared_ms /= repeat;
    unshared_ms /= repeat;
    std::cout << "size " << w << "x" << h << ", " << k << " step(s), " << repeat << " repeat(s)\n";
    std::cout << "shared:   " << shared_ms << " ms (" << shared_flops << " flops)\n";
    std::cout << "unshared: " << unshared_ms << " ms total, " << unshared_ms / k
              << " ms/frame (" << unshared_flops << " flops)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"many-to-many splatting frame interpolation"};
    app.require_subcommand(1);
    unsigned seed = 7;
    int threads = 0;
    if (const char* env = std::getenv("M2M_THREADS")) threads = std::atoi(env);
    app.add_option("--seed", seed, "RNG seed shared by all commands");
    app.add_option("--threads", threads, "worker cap (currently single-threaded)");

    auto* ip = app.add_subcommand("interpolate", "synthesize frames at given time steps");
    std::string frame0, frame1, flow01, flow10, times = "0.5", model_path, out_dir = "out", gt;
    bool no_fill = false;
    int n_flows = 0;
    ip->add_option("--frame0", frame0, "first input frame (png/ppm)")->required();
    ip->add_option("--frame1", frame1, "second input frame (png/ppm)")->required();
    ip->add_option("--flow01", flow01, "optional external flow 0->1 (.flo)");
    ip->add_option("--flow10", flow10, "optional external flow 1->0 (.flo)");
    ip->add_option("--times", times, "comma-separated times in (0,1)");
    ip->add_option("--model", model_path, "model checkpoint")->required();
    ip->add_option("--out", out_dir, "output directory (frame_t{i}.png + ledger.json)");
    ip->add_flag("--no-fill", no_fill, "leave holes as magenta sentinel pixels");
    ip->add_option("--n-flows", n_flows, "use only the first N flow heads");

    auto* ho = app.add_subcommand("holes", "hole count and quality vs. sub-motion count");
    std::string n_list = "1,2,4", out_csv = "holes.csv";
    ho->add_option("--frame0", frame0, "first input frame")->required();
    ho->add_option("--frame1", frame1, "second input frame")->required();
    ho->add_option("--model", model_path, "model checkpoint")->required();
    ho->add_option("--n-flows", n_list, "comma-separated head counts");
    ho->add_option("--out", out_csv, "output CSV: n_flows,mean_holes,psnr");
    ho->add_option("--gt", gt, "optional ground-truth mid frame for the PSNR column");

    auto* tt = app.add_subcommand("train-toy", "train on synthetic scenes");
    std::string config_path, out_ckpt = "model.ckpt", log_csv = "train_log.csv";
    tt->add_option("--config", config_path, "key=value config file");
    tt->add_option("--out", out_ckpt, "checkpoint output path");
    tt->add_option("--log", log_csv, "loss CSV: iteration,charbonnier,census,total");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string scope = "all";
    gc->add_option("--scope", scope, "op | mrn | pipeline | all")
        ->check(CLI::IsMember({"op", "mrn", "pipeline", "all"}));

    auto* be = app.add_subcommand("bench", "shared vs. unshared runtime split");
    std::string size = "256x256";
    int bench_k = 1, bench_repeat = 3;
    be->add_option("--size", size, "input size WxH");
    be->add_option("--times", bench_k, "number of interpolated frames");
    be->add_option("--repeat", bench_repeat, "measurement repeats");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // usage errors are exit 1
    }
    (void)threads;

    try {
        if (ip->parsed())
            return cmd_interpolate(frame0, frame1, flow01, flow10, times, model_path, out_dir,
                                   no_fill, n_flows);
        if (ho->parsed()) return cmd_holes(frame0, frame1, model_path, n_list, out_csv, gt);
        if (tt->parsed()) return cmd_train_toy(config_path, out_ckpt, log_csv, seed);
        if (gc->parsed()) return cmd_gradcheck(scope, seed);
        if (be->parsed()) return cmd_bench(size, bench_k, bench_repeat, seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
