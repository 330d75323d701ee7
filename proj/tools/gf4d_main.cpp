// Copyright Contributors to the gf4d Project
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <ctime>
#include <fstream>
#include <iostream>

#include "gf4d/pipeline.hpp"
#include "gf4d/trainer.hpp"
#include "gf4d/workspace.hpp"

namespace fs = std::filesystem;
using namespace gf4d;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitMissingInput = 3;
constexpr int kExitNumericalAbort = 4;

std::string timestamp() {
    char buf[64];
    std::time_t t = std::time(nullptr);
    std::strftime(buf, sizeof(buf), "%Y-%m-%d %H:%M:%S", std::gmtime(&t));
    return buf;
}

TrainConfig make_train_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
    Config cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    // Command line overrides config file overrides built-in defaults.
    for (const auto& kv : overrides) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("--set expects key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return TrainConfig::from_config(cfg);
}

void append_log(const WorkspaceLayout& ws, const std::string& name, const std::string& text) {
    fs::create_directories(ws.logs());
    std::ofstream f(ws.logs() / name, std::ios::app);
    f << text;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir, bool force) {
    SceneSpec spec = spec_path.empty() ? SceneSpec{} : scene_spec_from_config(load_config(spec_path));
    WorkspaceLayout ws{fs::path(out_dir)};
    if (fs::exists(ws.root) && !fs::is_empty(ws.root) && !force) {
        std::cerr << "refusing to write into non-empty directory " << ws.root
                  << " (use --force)\n";
        return kExitMissingInput;
    }
    fs::create_directories(ws.root);
    WorkspaceLock lock(ws);
    SyntheticScene scene = make_scene(spec);
    MultiviewSequence seq = render_scene_sequence(scene);
    auto slots = write_sequence(ws, seq);
    write_manifest(ws, slots);
    std::cout << "synth: wrote " << slots.size() << " slots under " << ws.root.string() << "\n";
    return 0;
}

void save_stage_checkpoint(const WorkspaceLayout& ws, const TrainState& state,
                           const std::string& name) {
    fs::create_directories(ws.checkpoints());
    save_checkpoint(state, ws.checkpoints() / name);
}

int cmd_train(const std::string& workspace, const std::string& config_path,
              const std::string& stage, const std::vector<std::string>& overrides, bool resume) {
    WorkspaceLayout ws{fs::path(workspace)};
    WorkspaceLock lock(ws);
    TrainConfig cfg = make_train_config(config_path, overrides);
    append_log(ws, "effective_config.txt",
               "# train " + stage + " (header timestamp: " + timestamp() + ")\n" + cfg.echo());

    fs::create_directories(ws.logs());
    std::ofstream loss_log(ws.logs() / "train_log.txt", std::ios::app);
    loss_log << "# stage " << stage << " started (header timestamp: " << timestamp() << ")\n";
    LossLogger logger = [&](const LossReport& rep) { loss_log << rep.to_line() << "\n"; };

    SequenceRequirements req;
    req.flows = stage != "static";
    MultiviewSequence inputs = load_sequence(ws, /*use_regenerated=*/false, req);

    auto latest_hook = [&](const TrainState& st) { save_stage_checkpoint(ws, st, "latest.gf4d"); };

    TrainState state;
    bool have_state = false;
    if (resume && fs::exists(ws.checkpoints() / "latest.gf4d")) {
        state = load_checkpoint(ws.checkpoints() / "latest.gf4d", cfg);
        have_state = true;
        std::cout << "resumed " << state.stage << " at iteration " << state.iteration << "\n";
    }
    auto load_stage = [&](const std::string& name) {
        if (!have_state) {
            state = load_checkpoint(ws.checkpoints() / name, cfg);
            have_state = true;
        }
    };

    try {
        if (stage == "static" || stage == "all") {
            if (!have_state) {
                state = make_static_state(inputs, cfg);
                have_state = true;
            }
            run_static_stage(state, inputs, cfg, logger, latest_hook);
            save_stage_checkpoint(ws, state, "stage_static.gf4d");
            std::cout << "static stage complete: " << state.field.gaussian_count()
                      << " gaussians, " << state.field.control_count() << " control points\n";
        }
        if (stage == "coarse" || stage == "all") {
            if (stage == "coarse") load_stage("stage_static.gf4d");
            train_stage(state, inputs, "coarse", cfg, logger, latest_hook);
            save_stage_checkpoint(ws, state, "stage_coarse.gf4d");
            std::cout << "coarse stage complete\n";
        }
        if (stage == "refine" || stage == "all") {
            if (stage == "refine") load_stage("stage_coarse.gf4d");
            SequenceRequirements rreq;
            rreq.flows = true;
            MultiviewSequence regen;
            try {
                regen = load_sequence(ws, /*use_regenerated=*/true, rreq);
            } catch (const MissingInput& e) {
                std::cerr << "refine requires regenerated/ sequences; run the regenerate command\n"
                          << e.what() << "\n";
                return kExitMissingInput;
            }
            train_stage(state, regen, "refine", cfg, logger, latest_hook);
            save_stage_checkpoint(ws, state, "stage_refine.gf4d");
            std::cout << "refine stage complete\n";
        }
    } catch (const NumericalAbort&) {
        if (have_state) {
            save_stage_checkpoint(ws, state, "diagnostic.gf4d");
            std::cerr << "wrote diagnostic checkpoint to "
                      << (ws.checkpoints() / "diagnostic.gf4d") << "\n";
        }
        throw;
    }
    return 0;
}

int cmd_render(const std::string& workspace, const std::string& checkpoint, int view, int time,
               int flow_to, const std::string& out_dir) {
    WorkspaceLayout ws{fs::path(workspace)};
    CameraRig rig = load_cameras(ws.cameras_path());
    if (view < 1 || view > int(rig.cameras.size()))
        throw std::invalid_argument("unknown view index " + std::to_string(view));
    TrainConfig cfg;
    TrainState state = load_checkpoint(checkpoint, cfg);
    state.field.timeline_count = std::max(state.field.timeline_count, rig.frames);
    if (time < 1 || time > state.field.timeline_count)
        throw std::invalid_argument("time index out of the checkpoint timeline");

    const Camera& cam = rig.cameras[size_t(view - 1)];
    fs::path out = out_dir.empty() ? ws.renders() : fs::path(out_dir);
    fs::create_directories(out);

    RenderChannels ch = RenderChannels::geometry();
    RenderOutput r = rasterize(deform(state.field, time), cam, ch);
    std::string base = "frame" + std::to_string(time) + "_view" + std::to_string(view);
    write_png(out / (base + "_rgb.png"), quantize_unit(r.rgb));
    write_png(out / (base + "_alpha.png"), quantize_unit(r.alpha));
    write_pfm(out / (base + "_depth.pfm"), to_float(r.depth));
    write_pfm(out / (base + "_normal.pfm"), to_float(r.normal));
    if (flow_to >= 1) {
        if (flow_to > state.field.timeline_count)
            throw std::invalid_argument("--flow-to out of the checkpoint timeline");
        FlowMap flow = render_flow(state.field, cam, time, flow_to);
        write_flo4(out / (base + "_flow_to" + std::to_string(flow_to) + ".flo4"), flow);
        // PFM variant carries (u, v, validity).
        ImageF pf(flow.width(), flow.height(), 3);
        for (int y = 0; y < flow.height(); ++y)
            for (int x = 0; x < flow.width(); ++x) {
                pf.at(x, y, 0) = float(flow.uv.at(x, y, 0));
                pf.at(x, y, 1) = float(flow.uv.at(x, y, 1));
                pf.at(x, y, 2) = flow.validity.at(x, y) ? 1.0f : 0.0f;
            }
        write_pfm(out / (base + "_flow_to" + std::to_string(flow_to) + ".pfm"), pf);
    }
    std::cout << "rendered " << base << " into " << out.string() << "\n";
    return 0;
}

int cmd_regenerate(const std::string& workspace, const std::string& checkpoint, int tau,
                   int interval, double gamma, uint64_t seed) {
    WorkspaceLayout ws{fs::path(workspace)};
    WorkspaceLock lock(ws);
    TrainConfig tcfg;
    TrainState state = load_checkpoint(checkpoint, tcfg);
    SequenceRequirements req;
    MultiviewSequence inputs = load_sequence(ws, false, req);
    if (state.field.timeline_count != inputs.frames)
        throw std::invalid_argument("checkpoint timeline does not match the workspace");

    RegenerateConfig cfg;
    cfg.tau = tau;
    cfg.interval = interval;
    cfg.gamma = gamma;
    cfg.seed = seed;
    RegenerateResult result = regenerate_pipeline(state.field, inputs, cfg);

    for (int n = 1; n <= inputs.frames; ++n)
        for (int k = 1; k <= inputs.views(); ++k)
            write_png(ws.regenerated_frame_path(n, k),
                      quantize_unit(result.sequence.images[result.sequence.slot(n, k)]));

    std::ostringstream stats;
    stats << "# regenerate tau=" << tau << " interval=" << interval << " gamma=" << gamma
          << " (header timestamp: " << timestamp() << ")\n";
    for (int k = 1; k <= inputs.views(); ++k) {
        stats << "view " << k << " valid_warp_fraction:";
        for (double f : result.valid_warp_fraction[size_t(k - 1)]) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), " %.4f", f);
            stats << buf;
        }
        stats << "\n";
    }
    append_log(ws, "regenerate_log.txt", stats.str());
    std::cout << "regenerated " << inputs.frames << "x" << inputs.views() << " frames\n";
    return 0;
}

int cmd_eval(const std::string& workspace, const std::string& checkpoint,
             const std::string& out_path) {
    WorkspaceLayout ws{fs::path(workspace)};
    TrainConfig cfg;
    TrainState state = load_checkpoint(checkpoint, cfg);
    SequenceRequirements req;
    MultiviewSequence seq = load_sequence(ws, false, req);
    if (state.field.timeline_count < seq.frames)
        throw std::invalid_argument("checkpoint timeline shorter than the workspace sequence");
    EvalReport rep = evaluate_against_sequence(state.field, seq);
    std::string text = rep.to_text();
    fs::path out = out_path.empty() ? ws.logs() / "eval_report.txt" : fs::path(out_path);
    io::write_file_atomic(out, text);
    std::cout << text;
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dynamic Gaussian field reconstruction with flow-guided token propagation"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic oracle workspace");
    std::string synth_spec, synth_out;
    bool synth_force = false;
    synth->add_option("--spec", synth_spec, "scene spec config file");
    synth->add_option("--out", synth_out, "output workspace directory")->required();
    synth->add_flag("--force", synth_force, "overwrite a non-empty directory");

    auto* train = app.add_subcommand("train", "Run the staged optimization");
    std::string train_ws, train_cfg, train_stage_name = "all";
    std::vector<std::string> train_sets;
    bool train_resume = false;
    train->add_option("--workspace", train_ws, "workspace directory")->required();
    train->add_option("--config", train_cfg, "train config file");
    train->add_option("--stage", train_stage_name, "static|coarse|refine|all")
        ->check(CLI::IsMember({"static", "coarse", "refine", "all"}));
    train->add_option("--set", train_sets, "key=value config override (repeatable)");
    train->add_flag("--resume", train_resume, "resume from checkpoints/latest.gf4d");

    auto* render = app.add_subcommand("render", "Render channels from a checkpoint");
    std::string render_ws, render_ckpt, render_out;
    int render_view = 1, render_time = 1, render_flow_to = 0;
    render->add_option("--workspace", render_ws, "workspace (cameras + default output)")
        ->required();
    render->add_option("--checkpoint", render_ckpt, "field checkpoint")->required();
    render->add_option("--view", render_view, "viewpoint index (1-based)")->required();
    render->add_option("--time", render_time, "timestep (1-based)")->required();
    render->add_option("--flow-to", render_flow_to, "also render flow to this timestep");
    render->add_option("--out", render_out, "output directory (default workspace/renders)");

    auto* regen = app.add_subcommand("regenerate", "Regenerate sequences with token propagation");
    std::string regen_ws, regen_ckpt;
    int regen_tau = 20, regen_interval = 8;
    double regen_gamma = 0.2;
    uint64_t regen_seed = 0;
    regen->add_option("--workspace", regen_ws, "workspace directory")->required();
    regen->add_option("--checkpoint", regen_ckpt, "coarse checkpoint")->required();
    regen->add_option("--tau", regen_tau, "propagation step threshold");
    regen->add_option("--interval", regen_interval, "keyframe interval");
    regen->add_option("--gamma", regen_gamma, "toy denoiser contraction rate");
    regen->add_option("--seed", regen_seed, "noise seed");

    auto* eval = app.add_subcommand("eval", "Per-view, per-frame PSNR/SSIM/EPE report");
    std::string eval_ws, eval_ckpt, eval_out;
    eval->add_option("--workspace", eval_ws, "workspace directory")->required();
    eval->add_option("--checkpoint", eval_ckpt, "field checkpoint")->required();
    eval->add_option("--out", eval_out, "report path (default workspace/logs/eval_report.txt)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_spec, synth_out, synth_force);
        if (train->parsed())
            return cmd_train(train_ws, train_cfg, train_stage_name, train_sets, train_resume);
        if (render->parsed())
            return cmd_render(render_ws, render_ckpt, render_view, render_time, render_flow_to,
                              render_out);
        if (regen->parsed())
            return cmd_regenerate(regen_ws, regen_ckpt, regen_tau, regen_interval, regen_gamma,
                                  regen_seed);
        if (eval->parsed()) return cmd_eval(eval_ws, eval_ckpt, eval_out);
    } catch (const NumericalAbort& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumericalAbort;
    } catch (const MissingInput& e) {
        std::cerr << e.what() << "\n";
        return kExitMissingInput;
    } catch (const FormatError& e) {
        std::cerr << e.what() << "\n";
        return kExitMissingInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitUsage;
}
