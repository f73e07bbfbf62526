// ebsr: command-line entry point for the event-based motion-deblur
// super-resolution pipeline.
//
// Subcommands:
//   simulate  render sequences (from PNG frame dirs or the built-in synthetic
//             scene generator) into blurry LR + event + sharp HR samples
//   train     run the training loop over a simulated dataset
//   eval      compute PSNR/SSIM of a checkpoint over a dataset
//   infer     restore one blurry LR image + event file to HR
//   params    print the parameter count of a configuration
//
// Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric error.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ebsr/checkpoint.hpp"
#include "ebsr/dataset.hpp"
#include "ebsr/event_sim.hpp"
#include "ebsr/image_io.hpp"
#include "ebsr/mcer.hpp"
#include "ebsr/network.hpp"
#include "ebsr/training.hpp"

namespace fs = std::filesystem;
using namespace ebsr;

namespace {

// Flat run configuration; every key is also an INI key via --config.
struct RunConfig {
    // model
    std::int64_t scale = 4;
    std::int64_t in_channels = 3;
    std::int64_t embed_dim = 128;
    std::int64_t num_rdstb = 4;
    std::int64_t stl_per_rdstb = 4;
    std::int64_t window_size = 8;
    std::int64_t num_heads = 4;
    std::int64_t scma_heads = 1;
    double mlp_ratio = 4.0;
    std::string mcer_scales = "1.0,0.5,0.25";
    bool no_mcer = false;
    bool no_scma = false;
    bool no_irg = false;
    // simulator
    double threshold_c = 0.2;
    double log_eps = 1e-3;
    double exposure = 1.0;
    std::int64_t frames = 13;
    std::int64_t synth = 0;
    std::int64_t height = 64;
    std::int64_t width = 64;
    // training
    double alpha = 1.0;
    double beta = 0.0;
    double lr = 1e-4;
    std::int64_t epochs = 1;
    std::int64_t batch = 4;
    std::int64_t crop = 0;
    bool no_augment = false;
    double target_psnr = 0.0;
    // shared
    std::uint64_t seed = 0;
    std::int64_t jobs = 1;
    // paths
    std::string input, data, val_data, out, checkpoint, resume;
    std::string blurry, events, sidecar, dump_mcer;
};

std::vector<double> parse_scales(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &pos);
        } catch (const std::exception&) {
            throw ConfigError("mcer_scales: cannot parse '" + item + "'");
        }
        if (pos != item.size()) throw ConfigError("mcer_scales: cannot parse '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("mcer_scales: empty list");
    return out;
}

MCERConfig make_mcer_config(const RunConfig& rc) {
    MCERConfig mc;
    mc.scales = rc.no_mcer ? std::vector<double>{1.0} : parse_scales(rc.mcer_scales);
    mc.validate();
    return mc;
}

NetworkConfig make_network_config(const RunConfig& rc, const MCERConfig& mc) {
    NetworkConfig nc;
    nc.scale = rc.scale;
    nc.in_channels = rc.in_channels;
    nc.embed_dim = rc.embed_dim;
    nc.num_rdstb = rc.num_rdstb;
    nc.stl_per_rdstb = rc.stl_per_rdstb;
    nc.window_size = rc.window_size;
    nc.num_heads = rc.num_heads;
    nc.scma_heads = rc.scma_heads;
    nc.mlp_ratio = rc.mlp_ratio;
    nc.mcer_channels = mc.total_channels();
    nc.use_scma = !rc.no_scma;
    nc.use_irg = !rc.no_irg;
    nc.validate();
    return nc;
}

// Registers every option on the main app (flat namespace): CLI11 only
// processes --config files on the root app, and a single flat key space is
// what the INI format wants anyway. Subcommands stay bare and fall through.
void add_model_options(CLI::App* app, RunConfig& rc) {
    app->add_option("--scale", rc.scale, "super-resolution factor (2 or 4)")
        ->capture_default_str();
    app->add_option("--in_channels", rc.in_channels, "image channels (1 or 3)")
        ->capture_default_str();
    app->add_option("--embed_dim", rc.embed_dim, "feature width C")->capture_default_str();
    app->add_option("--num_rdstb", rc.num_rdstb, "RDSTB count")->capture_default_str();
    app->add_option("--stl_per_rdstb", rc.stl_per_rdstb, "STLs per RDSTB")->capture_default_str();
    app->add_option("--window_size", rc.window_size, "attention window")->capture_default_str();
    app->add_option("--num_heads", rc.num_heads, "STL attention heads")->capture_default_str();
    app->add_option("--scma_heads", rc.scma_heads, "SCMA attention heads")->capture_default_str();
    app->add_option("--mlp_ratio", rc.mlp_ratio, "MLP hidden ratio")->capture_default_str();
    app->add_option("--mcer_scales", rc.mcer_scales, "comma-separated window fractions")
        ->capture_default_str();
    app->add_flag("--no-mcer", rc.no_mcer, "single-scale event representation");
    app->add_flag("--no-scma", rc.no_scma, "replace SCMA with a 3x3 conv fusion");
    app->add_flag("--no-irg", rc.no_irg, "replace RDSTBs with plain 3x3 convs");
}

void add_common_options(CLI::App* app, RunConfig& rc) {
    app->add_option("--seed", rc.seed, "RNG seed")->capture_default_str();
    app->add_option("--jobs", rc.jobs, "worker threads (simulation/data loading)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app->set_config("--config", "", "INI config file (flags win over file values)");
    app->allow_config_extras(CLI::config_extras_mode::error);
}

void echo_config(CLI::App* app, const std::string& dir) {
    std::ofstream os(fs::path(dir) / "config.ini", std::ios::trunc);
    if (!os) throw IoError("cannot write config echo under " + dir);
    os << app->config_to_str(true, false);
    if (!os) throw IoError("failed writing config echo under " + dir);
}

std::string manifest_path_of(const std::string& data) {
    fs::path p(data);
    if (fs::is_directory(p)) p /= "manifest.json";
    return p.string();
}

std::vector<TrainSample> load_prepared(const std::string& data, const MCERConfig& mc) {
    std::vector<TrainSample> out;
    for (const LoadedSample& s : load_dataset(manifest_path_of(data)))
        out.push_back(prepare_sample(s, mc));
    return out;
}

Tensor to_channels(const Tensor& img, std::int64_t channels) {
    if (img.dim(0) == channels) return img;
    if (channels == 1) return to_luminance(img);
    if (channels == 3 && img.dim(0) == 1) {
        Tensor out({3, img.dim(1), img.dim(2)});
        for (std::int64_t c = 0; c < 3; ++c)
            std::copy(img.data.begin(), img.data.end(),
                      out.data.begin() + c * img.dim(1) * img.dim(2));
        return out;
    }
    throw DimensionError("cannot adapt " + shape_str(img.shape) + " to " +
                         std::to_string(channels) + " channels");
}

// ---------------------------------------------------------------------------
// simulate

struct SequenceInput {
    std::string id;
    std::vector<Tensor> frames;
};

std::vector<std::string> sorted_pngs(const fs::path& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    return files;
}

std::vector<SequenceInput> collect_sequences(const RunConfig& rc) {
    std::vector<SequenceInput> seqs;
    if (!rc.input.empty() && rc.synth > 0)
        throw ConfigError("simulate: use either --input or --synth, not both");
    if (rc.input.empty() && rc.synth <= 0)
        throw ConfigError("simulate: one of --input or --synth is required");
    if (!rc.input.empty()) {
        if (!fs::is_directory(rc.input)) throw IoError("input directory not found: " + rc.input);
        std::vector<fs::path> subdirs;
        for (const auto& e : fs::directory_iterator(rc.input))
            if (e.is_directory()) subdirs.push_back(e.path());
        std::sort(subdirs.begin(), subdirs.end());
        auto load_seq = [&](const fs::path& dir, const std::string& id) {
            SequenceInput si;
            si.id = id;
            for (const std::string& f : sorted_pngs(dir))
                si.frames.push_back(to_channels(read_png(f), rc.in_channels));
            if (si.frames.size() < 2)
                throw IoError("sequence " + dir.string() + " has fewer than 2 PNG frames");
            return si;
        };
        if (subdirs.empty()) {
            seqs.push_back(load_seq(rc.input, fs::path(rc.input).filename().string()));
        } else {
            for (const fs::path& d : subdirs) seqs.push_back(load_seq(d, d.filename().string()));
        }
    } else {
        Rng rng(rc.seed);
        for (std::int64_t i = 0; i < rc.synth; ++i) {
            SequenceInput si;
            char id[32];
            std::snprintf(id, sizeof id, "synth_%03lld", static_cast<long long>(i));
            si.id = id;
            si.frames = make_synthetic_frames(rng, rc.in_channels, rc.height, rc.width, rc.frames);
            seqs.push_back(std::move(si));
        }
    }
    return seqs;
}

int cmd_simulate(CLI::App* app, const RunConfig& rc) {
    if (rc.out.empty()) throw ConfigError("simulate: --out is required");
    const std::vector<SequenceInput> seqs = collect_sequences(rc);
    fs::create_directories(rc.out);

    Manifest manifest;
    manifest.scale = rc.scale;
    manifest.samples.resize(seqs.size());

    const TimeInterval exposure{0.0, rc.exposure};
    auto work = [&](std::size_t i) {
        const SequenceInput& si = seqs[i];
        const SimulatedSample sim =
            simulate_sample(si.frames, exposure, rc.scale, rc.threshold_c, rc.log_eps);
        const fs::path dir = fs::path(rc.out) / si.id;
        fs::create_directories(dir);
        write_png((dir / "blurry_lr.png").string(), sim.blurry_lr);
        write_png((dir / "sharp_hr.png").string(), sim.sharp_hr);
        write_events((dir / "events.evt1").string(), sim.events);
        write_sidecar((dir / "sample.json").string(), sim.meta);
        manifest.samples[i] = SampleRecord{si.id, si.id + "/blurry_lr.png", si.id + "/sharp_hr.png",
                                           si.id + "/events.evt1", si.id + "/sample.json"};
    };

    if (rc.jobs <= 1) {
        for (std::size_t i = 0; i < seqs.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::mutex err_mu;
        std::exception_ptr err;
        const std::size_t nw = std::min<std::size_t>(static_cast<std::size_t>(rc.jobs), seqs.size());
        for (std::size_t t = 0; t < nw; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= seqs.size()) return;
                    try {
                        work(i);
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(err_mu);
                        if (!err) err = std::current_exception();
                        return;
                    }
                }
            });
        for (std::thread& t : pool) t.join();
        if (err) std::rethrow_exception(err);
    }

    write_manifest((fs::path(rc.out) / "manifest.json").string(), manifest);
    echo_config(app, rc.out);
    std::cout << "simulated " << seqs.size() << " sample(s) -> " << rc.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(CLI::App* app, const RunConfig& rc) {
    if (rc.data.empty()) throw ConfigError("train: --data is required");
    if (rc.out.empty()) throw ConfigError("train: --out is required");
    const MCERConfig mc = make_mcer_config(rc);
    const NetworkConfig nc = make_network_config(rc, mc);

    const std::vector<TrainSample> train_set = load_prepared(rc.data, mc);
    std::vector<TrainSample> val_set;
    if (!rc.val_data.empty()) val_set = load_prepared(rc.val_data, mc);

    Checkpoint resume;
    const Checkpoint* resume_ptr = nullptr;
    if (!rc.resume.empty()) {
        resume = load_checkpoint(rc.resume);
        resume_ptr = &resume;
    }

    fs::create_directories(rc.out);
    echo_config(app, rc.out);

    LossConfig loss;
    loss.alpha = rc.alpha;
    loss.beta = rc.beta;

    TrainOptions opt;
    opt.epochs = rc.epochs;
    opt.batch = rc.batch;
    opt.crop_lr = rc.crop;
    opt.augment = !rc.no_augment;
    opt.base_lr = rc.lr;
    opt.seed = rc.seed;
    opt.target_psnr = rc.target_psnr;
    opt.run_dir = rc.out;

    const TrainResult res = train_loop(nc, mc, train_set, val_set, loss, opt, resume_ptr);
    write_metrics_csv((fs::path(rc.out) / "metrics.csv").string(), res.log);
    for (const LogRow& r : res.log)
        std::cout << "epoch " << r.epoch << " step " << r.step << " loss " << r.loss
                  << " val_psnr " << r.val_psnr << " val_ssim " << r.val_ssim << "\n";
    std::cout << "run directory: " << rc.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

int cmd_eval(CLI::App* app, const RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    if (rc.data.empty()) throw ConfigError("eval: --data is required");
    if (rc.out.empty()) throw ConfigError("eval: --out is required");
    Checkpoint ck = load_checkpoint(rc.checkpoint);
    const std::vector<TrainSample> samples = load_prepared(rc.data, ck.mcer);
    const EvalResult res = evaluate(ck.config, ck.params, samples);
    fs::create_directories(rc.out);
    echo_config(app, rc.out);
    write_eval_csv((fs::path(rc.out) / "eval.csv").string(), res);
    std::cout << "mean_psnr " << res.mean_psnr << "\nmean_ssim " << res.mean_ssim << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// infer

int cmd_infer(CLI::App*, const RunConfig& rc) {
    if (rc.checkpoint.empty()) throw ConfigError("infer: --checkpoint is required");
    if (rc.blurry.empty() || rc.events.empty())
        throw ConfigError("infer: --blurry and --events are required");
    if (rc.out.empty()) throw ConfigError("infer: --out is required");
    Checkpoint ck = load_checkpoint(rc.checkpoint);

    const Tensor blurry = read_png(rc.blurry);
    const EventStream events = read_events(rc.events);
    const std::string sidecar_path =
        rc.sidecar.empty() ? (fs::path(rc.events).parent_path() / "sample.json").string()
                           : rc.sidecar;
    const Sidecar meta = read_sidecar(sidecar_path);

    const MCERTensor mcer = encode_mcer(events, meta.exposure(), ck.mcer);
    const Tensor mcer_net = normalize_for_network(mcer, ck.mcer);
    if (!rc.dump_mcer.empty()) dump_mcer_sheet(rc.dump_mcer, mcer, ck.mcer);

    const Tensor pred = ebsrnet_infer(ck.config, ck.params, blurry, mcer_net);
    write_png(rc.out, pred);
    std::cout << "wrote " << rc.out << " (" << shape_str(pred.shape) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// params

int cmd_params(CLI::App*, const RunConfig& rc) {
    const MCERConfig mc = make_mcer_config(rc);
    const NetworkConfig nc = make_network_config(rc, mc);
    std::cout << "parameters: " << param_count(nc) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-based motion-deblur super-resolution"};
    app.require_subcommand(1);

    RunConfig rc;
    add_model_options(&app, rc);
    add_common_options(&app, rc);
    app.add_option("--input", rc.input, "simulate: directory of PNG frame sequences");
    app.add_option("--synth", rc.synth, "simulate: generate N synthetic sequences");
    app.add_option("--frames", rc.frames, "simulate: latent frames per sequence (synthetic)")
        ->capture_default_str();
    app.add_option("--height", rc.height, "simulate: HR frame height (synthetic)")
        ->capture_default_str();
    app.add_option("--width", rc.width, "simulate: HR frame width (synthetic)")
        ->capture_default_str();
    app.add_option("--exposure", rc.exposure, "simulate: exposure duration")
        ->capture_default_str();
    app.add_option("--threshold_c", rc.threshold_c, "simulate: event contrast threshold")
        ->capture_default_str();
    app.add_option("--log_eps", rc.log_eps, "simulate: log-intensity epsilon")
        ->capture_default_str();
    app.add_option("--data", rc.data, "train/eval: dataset directory or manifest.json");
    app.add_option("--val_data", rc.val_data, "train: validation dataset (defaults to --data)");
    app.add_option("--out", rc.out, "output path (dataset/run/eval directory, or PNG for infer)");
    app.add_option("--checkpoint", rc.checkpoint, "eval/infer: checkpoint file");
    app.add_option("--resume", rc.resume, "train: checkpoint to resume from");
    app.add_option("--alpha", rc.alpha, "train: L1 weight")->capture_default_str();
    app.add_option("--beta", rc.beta, "train: perceptual weight (needs an extractor)")
        ->capture_default_str();
    app.add_option("--lr", rc.lr, "train: base learning rate")->capture_default_str();
    app.add_option("--epochs", rc.epochs, "train: epochs")->capture_default_str();
    app.add_option("--batch", rc.batch, "train: batch size")->capture_default_str();
    app.add_option("--crop", rc.crop, "train: LR crop size (0 = full frame)")
        ->capture_default_str();
    app.add_flag("--no-augment", rc.no_augment, "train: disable horizontal flips");
    app.add_option("--target_psnr", rc.target_psnr, "train: early-stop validation PSNR (0 = off)")
        ->capture_default_str();
    app.add_option("--blurry", rc.blurry, "infer: blurry LR PNG");
    app.add_option("--events", rc.events, "infer: EVT1 event file");
    app.add_option("--sidecar", rc.sidecar, "infer: sample sidecar JSON (default: next to events)");
    app.add_option("--dump_mcer", rc.dump_mcer, "infer: write the MCER channel sheet PNG here");

    CLI::App* sim = app.add_subcommand("simulate", "render sequences into training samples");
    CLI::App* train = app.add_subcommand("train", "train on a simulated dataset");
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    CLI::App* inf = app.add_subcommand("infer", "restore one blurry LR image");
    CLI::App* par = app.add_subcommand("params", "print the model parameter count");
    for (CLI::App* sub : {sim, train, ev, inf, par}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sim->parsed()) return cmd_simulate(&app, rc);
        if (train->parsed()) return cmd_train(&app, rc);
        if (ev->parsed()) return cmd_eval(&app, rc);
        if (inf->parsed()) return cmd_infer(&app, rc);
        if (par->parsed()) return cmd_params(&app, rc);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ArgumentError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
