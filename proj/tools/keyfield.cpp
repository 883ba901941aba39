// Command-line front end: one-shot `run` and the HTTP `serve` mode.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "keyfield/backends.hpp"
#include "keyfield/error.hpp"
#include "keyfield/pipeline.hpp"
#include "keyfield/service.hpp"

namespace fs = std::filesystem;
using namespace keyfield;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDegraded = 1;
constexpr int kExitConfig = 2;

struct RunOptions {
  std::string image;
  std::string question;
  std::string backend = "mock";
  std::string fixtures;
  std::string out = ".";
  std::string emit = "overlay,session";
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::set<std::string> parse_emit(const std::string& list) {
  static const std::set<std::string> known{"overlay", "session", "transcripts"};
  std::set<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (!known.contains(item)) throw ConfigError("unknown --emit entry: " + item);
    out.insert(item);
  }
  return out;
}

Backends backends_for(const std::string& mode_name, const std::string& fixtures) {
  BackendConfig config = BackendConfig::from_env();
  try {
    config.mode = parse_backend_mode(mode_name);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!fixtures.empty()) config.fixture_dir = fixtures;
  if (config.mode == BackendMode::mock && fixtures.empty()) {
    throw ConfigError("mock backend requires --fixtures");
  }
  try {
    return make_backends(config);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

// Session ids in CLI output are derived from the inputs so repeated runs are
// byte-identical.
std::string cli_session_id(const std::string& image_digest, const std::string& question) {
  return sha256_hex(image_digest + "\n" + question).substr(0, 22);
}

int run(const RunOptions& opts) {
  std::set<std::string> emit;
  Backends backends;
  Bytes image;
  try {
    emit = parse_emit(opts.emit);
    if (opts.image.empty()) throw ConfigError("--image is required");
    if (opts.question.empty()) throw ConfigError("--question is required");
    backends = backends_for(opts.backend, opts.fixtures);
    std::error_code ec;
    fs::create_directories(opts.out, ec);
    if (ec || !fs::is_directory(opts.out)) throw ConfigError("cannot create --out " + opts.out);
    try {
      image = read_file(opts.image);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::shared_ptr<RecordingChat> recorder;
  if (emit.contains("transcripts")) {
    recorder = std::make_shared<RecordingChat>(backends.chat);
    backends.chat = recorder;
  }
  const Pipeline pipeline(backends);
  const fs::path out(opts.out);

  QueryRecord record;
  Session session;
  try {
    session = pipeline.detect_objects(image);
    session.session_id = cli_session_id(session.image_digest, opts.question);
    record = pipeline.answer_query(session, opts.question);
  } catch (const Error& e) {
    std::cerr << "error";
    if (!e.stage().empty()) std::cerr << " [" << e.stage() << "]";
    std::cerr << ": " << e.what() << "\n";
    return e.code() == ErrorCode::invalid_input && e.stage().empty() ? kExitConfig : kExitDegraded;
  }

  std::cout << record.result.answer_text << "\n";
  if (!record.diagnostic.empty()) std::cerr << "diagnostic: " << record.diagnostic << "\n";

  const fs::path overlay_path = out / "overlay.png";
  if (emit.contains("overlay")) {
    if (record.result.has_highlight()) {
      write_file_atomic(overlay_path.string(), record.result.annotated_image);
    } else {
      // A stale overlay from an earlier run must not pass for this one.
      fs::remove(overlay_path);
    }
  }
  if (emit.contains("session")) {
    write_file_atomic((out / "session.json").string(), session_to_json(session).dump(2) + "\n");
  }
  if (recorder) {
    const auto transcripts = recorder->transcripts();
    write_file_atomic((out / "transcripts.json").string(),
                      transcripts_to_json(transcripts).dump(2) + "\n");
  }

  switch (record.outcome) {
    case QueryOutcome::answered:
    case QueryOutcome::highlighted:
      return kExitOk;
    default:
      std::cerr << "query outcome: " << to_string(record.outcome) << "\n";
      return kExitDegraded;
  }
}

int serve(const std::string& backend, const std::string& fixtures, int port) {
  try {
    ServiceConfig config = ServiceConfig::from_env();
    if (port > 0) config.port = port;
    const char* env_mode = std::getenv("BACKEND_MODE");
    const std::string mode = !backend.empty() ? backend : (env_mode && *env_mode ? env_mode : "mock");
    std::string fixture_dir = fixtures;
    if (fixture_dir.empty()) {
      if (const char* env_dir = std::getenv("FIXTURE_DIR")) fixture_dir = env_dir;
    }
    Service service(Pipeline(backends_for(mode, fixture_dir)), config);
    std::cerr << "listening on " << config.host << ":" << config.port << "\n";
    if (!service.listen()) {
      std::cerr << "cannot bind " << config.host << ":" << config.port << "\n";
      return kExitConfig;
    }
    return kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Key-field detection on images via segmentation, captioning and a chat model"};
  app.require_subcommand(1);

  RunOptions run_opts;
  auto* run_cmd = app.add_subcommand("run", "Answer one question about one image");
  run_cmd->add_option("--image", run_opts.image, "Input image (PNG or JPEG)");
  run_cmd->add_option("--question", run_opts.question, "Natural-language question");
  run_cmd->add_option("--backend", run_opts.backend, "live or mock")->capture_default_str();
  run_cmd->add_option("--fixtures", run_opts.fixtures, "Fixture directory for mock mode");
  run_cmd->add_option("--out", run_opts.out, "Output directory")->capture_default_str();
  run_cmd->add_option("--emit", run_opts.emit, "Comma list of overlay,session,transcripts")
      ->capture_default_str();

  std::string serve_backend;
  std::string serve_fixtures;
  int serve_port = 0;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--backend", serve_backend, "live or mock (default BACKEND_MODE)");
  serve_cmd->add_option("--fixtures", serve_fixtures, "Fixture directory (default FIXTURE_DIR)");
  serve_cmd->add_option("--port", serve_port, "Port (default PORT or 8080)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (*run_cmd) return run(run_opts);
  return serve(serve_backend, serve_fixtures, serve_port);
}
