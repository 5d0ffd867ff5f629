/**
 * @file duet.cpp
 * @brief Command-line entry points: serve, prep, train, eval, analyze,
 *        check-log.
 */

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "duet/analysis.hpp"
#include "duet/genmodel.hpp"
#include "duet/server.hpp"
#include "duet/session.hpp"

namespace fs = std::filesystem;
using namespace duet;

namespace {

MelodyDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return read_dataset(in);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string address = "0.0.0.0";
  unsigned short port = 8080;
  std::string partner = "vae";
  std::string checkpoint, data, static_root, log_dir;
  SessionConfig config;
  std::string a = "A", b = "B";
};

int run_serve(ServeArgs args) {
  auto& c = args.config;
  c.partner = parse_partner_kind(args.partner);
  c.participant_ids = {args.a, args.b};
  if (args.log_dir.empty()) {
    if (const char* env = std::getenv("DUET_LOG_DIR")) args.log_dir = env;
  }

  PartnerFn partner;
  if (c.partner == PartnerKind::Vae) {
    if (args.checkpoint.empty()) throw std::runtime_error("--checkpoint is required for the vae partner");
    auto model = std::make_shared<const ModelState>(load_checkpoint(args.checkpoint));
    if (model->config.bars != c.bars) {
      throw std::runtime_error("checkpoint was trained on " + std::to_string(model->config.bars) + "-bar spans, not " +
                               std::to_string(c.bars));
    }
    partner = make_vae_partner(model, c.params);
  } else if (c.partner == PartnerKind::Markov) {
    if (args.data.empty()) throw std::runtime_error("--data is required for the markov partner");
    const auto ds = load_dataset(args.data);
    if (ds.bars != c.bars) throw std::runtime_error("dataset bar span does not match --bars");
    partner = make_markov_partner(std::make_shared<const MarkovStats>(build_markov_stats(ds, c.markov_order)));
  }
  c.validate();

  WallClock clock;
  HostOptions options;
  options.async_generation = true;
  options.log_dir = args.log_dir;
  SessionHost host(c, partner, clock, options);

  net::ServerOptions so;
  so.address = args.address;
  so.port = args.port;
  so.static_root = args.static_root;
  net::Server server(host, so);

  std::cout << "listening on " << args.address << ":" << server.port() << " (" << to_string(c.partner) << ", "
            << c.condition().label() << ", " << c.turn_count() << " turns of " << c.turn_ms() << " ms)";
  if (!args.log_dir.empty()) std::cout << ", logs in " << args.log_dir;
  std::cout << std::endl;

  net::asio::io_context signals_ctx;
  net::asio::signal_set signals(signals_ctx, SIGINT, SIGTERM);
  signals.async_wait([](const boost::system::error_code&, int) {});
  server.start();
  signals_ctx.run();
  server.stop();
  if (host.log_path()) std::cout << "log written to " << *host.log_path() << std::endl;
  return 0;
}

// ---------------------------------------------------------------------------

struct PrepArgs {
  std::string in, out;
  int bars = 2;
  int rest_threshold = kDefaultRestThreshold;
};

int run_prep(const PrepArgs& args) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(args.in)) {
    auto ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (entry.is_regular_file() && (ext == ".mid" || ext == ".midi")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<SourceMelody> melodies;
  std::size_t bad = 0, not_four_four = 0;
  for (const auto& path : files) {
    try {
      const auto file = midi::parse_midi(read_bytes(path));
      if (auto m = source_from_midi(fs::relative(path, args.in).string(), file)) {
        melodies.push_back(std::move(*m));
      } else {
        ++not_four_four;
      }
    } catch (const midi::MidiError& e) {
      ++bad;
      std::cerr << "skip " << path.string() << ": " << e.what() << '\n';
    }
  }

  const auto ds = build_dataset(melodies, args.bars, args.rest_threshold);
  std::ofstream out(args.out);
  if (!out) throw std::runtime_error("cannot write " + args.out);
  write_dataset(out, ds);
  std::cout << files.size() << " files, " << not_four_four << " not 4/4, " << bad << " unreadable\n"
            << ds.stats.candidates << " windows, " << ds.stats.rest_excluded << " rest-excluded, "
            << ds.stats.duplicates << " duplicates, " << ds.sequences.size() << " kept -> " << args.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out, resume;
  ModelConfig model;
  TrainOptions opt;
  BetaSchedule beta;
};

int run_train(TrainArgs args) {
  const auto ds = load_dataset(args.data);
  ModelState state;
  if (!args.resume.empty()) {
    state = load_checkpoint(args.resume);
  } else {
    args.model.bars = ds.bars;
    state = init_model(args.model);
    state.beta = args.beta;
  }
  std::cout << ds.sequences.size() << " sequences, " << param_count(state.config) << " parameters\n";
  const auto report = train(state, ds, args.opt);
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    std::cout << "epoch " << e + 1 << " loss " << std::fixed << std::setprecision(4) << report.epoch_loss[e] << '\n';
  }
  std::cout << "reconstruction accuracy " << reconstruction_accuracy(state, ds.sequences) << '\n';
  save_checkpoint(args.out, state);
  std::cout << "saved " << args.out << " at step " << state.step << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data;
  int samples = 100;
  std::uint64_t seed = 1;
  std::vector<double> temperatures{0.5, 1.0, 1.5};
  std::vector<double> similarities{0.0, 0.3, 0.6, 0.9, 1.0};
};

int run_eval(const EvalArgs& args) {
  const auto state = load_checkpoint(args.checkpoint);
  const auto ds = load_dataset(args.data);
  if (ds.sequences.empty()) throw std::runtime_error("dataset is empty");
  const auto input = [&](int i) { return ds.sequences[static_cast<std::size_t>(i) % ds.sequences.size()]; };

  std::cout << "temperature  mean_token_entropy\n";
  for (double t : args.temperatures) {
    double sum = 0;
    for (int i = 0; i < args.samples; ++i) {
      CounterRng rng(args.seed, static_cast<std::uint64_t>(i));
      sum += token_entropy(respond(state, input(i), {t, 0.5}, rng).codes());
    }
    std::cout << std::setw(11) << t << "  " << sum / args.samples << '\n';
  }
  std::cout << "\nsimilarity  mean_edit_distance\n";
  for (double s : args.similarities) {
    double sum = 0;
    for (int i = 0; i < args.samples; ++i) {
      CounterRng rng(args.seed, static_cast<std::uint64_t>(i));
      sum += normalized_edit_distance(input(i).codes(), respond(state, input(i), {1.0, s}, rng).codes());
    }
    std::cout << std::setw(10) << s << "  " << sum / args.samples << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------

int run_analyze(const std::string& path, bool keep_all, std::vector<std::string> exclude) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  const auto rows = read_ratings_csv(in);
  if (!keep_all && exclude.empty()) exclude = default_exclusions();
  std::cout << format_report(analyze(rows, keep_all ? std::vector<std::string>{} : exclude));
  return 0;
}

int run_check_log(const std::string& path) {
  const auto log = load_log(path);
  const auto problems = check_log_invariants(log);
  std::cout << log.turns.size() << " turns, " << log.ratings.size() << " ratings, condition "
            << log.config.condition().label() << '\n';
  for (const auto& p : problems) std::cout << "violation: " << p << '\n';
  return problems.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"duet: call-and-response melody partner"};
  app.require_subcommand(1);

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "host one session over websocket");
  s->add_option("--address", serve.address);
  s->add_option("--port", serve.port, "0 picks a free port");
  s->add_option("--partner", serve.partner)->check(CLI::IsMember({"vae", "markov", "human-relay"}));
  s->add_option("--bars", serve.config.bars)->check(CLI::IsMember({2, 4}));
  s->add_option("--temperature", serve.config.params.temperature);
  s->add_option("--similarity", serve.config.params.similarity);
  s->add_flag("--temperature-scales-latent", serve.config.params.temperature_scales_latent);
  s->add_option("--turn-seconds", serve.config.turn_seconds);
  s->add_option("--cycles", serve.config.cycles);
  s->add_option("--tempo", serve.config.tempo_bpm);
  s->add_option("--markov-order", serve.config.markov_order);
  s->add_option("--seed", serve.config.seed);
  s->add_option("--checkpoint", serve.checkpoint);
  s->add_option("--data", serve.data, "dataset for the markov partner");
  s->add_option("--static", serve.static_root, "directory served at /");
  s->add_option("--log-dir", serve.log_dir, "defaults to $DUET_LOG_DIR");
  s->add_option("--participant-a", serve.a);
  s->add_option("--participant-b", serve.b);

  PrepArgs prep;
  auto* p = app.add_subcommand("prep", "MIDI directory -> token dataset");
  p->add_option("--in", prep.in)->required()->check(CLI::ExistingDirectory);
  p->add_option("--out", prep.out)->required();
  p->add_option("--bars", prep.bars)->check(CLI::IsMember({2, 4}));
  p->add_option("--rest-threshold", prep.rest_threshold);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train the VAE partner");
  t->add_option("--data", tr.data)->required();
  t->add_option("--out", tr.out)->required();
  t->add_option("--resume", tr.resume, "continue from a checkpoint");
  t->add_option("--epochs", tr.opt.epochs);
  t->add_option("--batch", tr.opt.batch_size);
  t->add_option("--lr", tr.opt.learning_rate);
  t->add_option("--clip", tr.opt.clip_norm);
  t->add_option("--seed", tr.model.seed);
  t->add_option("--embed", tr.model.embed_dim);
  t->add_option("--enc-hidden", tr.model.enc_hidden);
  t->add_option("--dec-hidden", tr.model.dec_hidden);
  t->add_option("--latent", tr.model.latent_dim);
  t->add_option("--conductor", tr.model.conductor_dim);
  t->add_option("--beta-end", tr.beta.end);
  t->add_option("--ramp-steps", tr.beta.ramp_steps);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "entropy and similarity sweeps");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--data", ev.data)->required();
  e->add_option("--samples", ev.samples);
  e->add_option("--seed", ev.seed);
  e->add_option("--temperatures", ev.temperatures)->delimiter(',');
  e->add_option("--similarities", ev.similarities)->delimiter(',');

  std::string ratings;
  bool keep_all = false;
  std::vector<std::string> exclude;
  auto* a = app.add_subcommand("analyze", "ratings CSV -> contrast estimates");
  a->add_option("ratings", ratings)->required();
  a->add_flag("--keep-all", keep_all, "do not drop any measure");
  a->add_option("--exclude", exclude)->delimiter(',');

  std::string log_path;
  auto* c = app.add_subcommand("check-log", "validate a session log");
  c->add_option("log", log_path)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (s->parsed()) return run_serve(serve);
    if (p->parsed()) return run_prep(prep);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_eval(ev);
    if (a->parsed()) return run_analyze(ratings, keep_all, exclude);
    if (c->parsed()) return run_check_log(log_path);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
