/**
 * @file server.hpp
 * @brief WebSocket + static-file server around a SessionHost (Boost.Beast).
 *
 * One io thread owns the host: frames from every connection and a periodic
 * tick are applied on that thread, so the host sees a single ordered stream.
 * Plain HTTP GETs on the same port serve the UI bundle.
 */

#pragma once

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <chrono>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>

#include "duet/host.hpp"
#include "duet/protocol.hpp"

namespace duet::net {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

class ServerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServerOptions {
  std::string address = "0.0.0.0";
  unsigned short port = 8080;  // 0 picks a free port
  std::string static_root;      // empty disables file serving
  int tick_ms = 20;
};

inline std::string mime_type(const std::filesystem::path& p) {
  static const std::map<std::string, std::string> types = {
      {".html", "text/html"},       {".js", "application/javascript"}, {".mjs", "application/javascript"},
      {".css", "text/css"},         {".json", "application/json"},     {".svg", "image/svg+xml"},
      {".png", "image/png"},        {".wav", "audio/wav"},             {".mp3", "audio/mpeg"},
      {".ico", "image/x-icon"},     {".map", "application/json"},      {".txt", "text/plain"}};
  const auto it = types.find(p.extension().string());
  return it == types.end() ? "application/octet-stream" : it->second;
}

/// Maps a request target to a file under root; empty for anything that
/// escapes the root or does not exist.
inline std::optional<std::filesystem::path> resolve_static(const std::string& root, std::string target) {
  if (root.empty()) return std::nullopt;
  target = target.substr(0, target.find_first_of("?#"));
  if (target.empty() || target[0] != '/' || target.find("..") != std::string::npos) return std::nullopt;
  if (target.back() == '/') target += "index.html";
  const auto path = std::filesystem::path(root) / target.substr(1);
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) return std::nullopt;
  return path;
}

class Server;

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket socket, Server& server) : ws_(std::move(socket)), server_(server) {}

  void run(http::request<http::string_body> request);
  void send(const wire::Payload& body, bool close_after);

 private:
  void on_accept(beast::error_code ec);
  void do_read();
  void on_read(beast::error_code ec, std::size_t);
  void do_write();
  void on_write(beast::error_code ec, std::size_t);
  void drop();

  websocket::stream<beast::tcp_stream> ws_;
  Server& server_;
  beast::flat_buffer buffer_;
  std::deque<std::string> outbox_;
  wire::Endpoint endpoint_;
  int id_ = 0;
  bool closing_ = false;
  bool dropped_ = false;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket socket, Server& server) : stream_(std::move(socket)), server_(server) {}
  void run() { do_read(); }

 private:
  void do_read() {
    request_ = {};
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, request_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }
  void on_read(beast::error_code ec, std::size_t);
  void on_write(bool keep_alive, beast::error_code ec, std::size_t) {
    if (ec || !keep_alive) {
      stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
      return;
    }
    do_read();
  }

  beast::tcp_stream stream_;
  Server& server_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> request_;
  std::shared_ptr<http::response<http::string_body>> response_;
};

class Server {
 public:
  /// Binds immediately; throws ServerError when the port is unavailable.
  Server(SessionHost& host, ServerOptions options)
      : host_(host), options_(std::move(options)), acceptor_(ioc_), timer_(ioc_) {
    beast::error_code ec;
    const auto address = asio::ip::make_address(options_.address, ec);
    if (ec) throw ServerError("bad listen address '" + options_.address + "'");
    const tcp::endpoint endpoint(address, options_.port);
    acceptor_.open(endpoint.protocol(), ec);
    if (!ec) acceptor_.set_option(asio::socket_base::reuse_address(true), ec);
    if (!ec) acceptor_.bind(endpoint, ec);
    if (!ec) acceptor_.listen(asio::socket_base::max_listen_connections, ec);
    if (ec) {
      throw ServerError("cannot listen on " + options_.address + ":" + std::to_string(options_.port) + ": " +
                        ec.message());
    }
  }

  ~Server() { stop(); }

  unsigned short port() const { return acceptor_.local_endpoint().port(); }
  SessionHost& host() { return host_; }
  const ServerOptions& options() const { return options_; }

  /// Serves on the calling thread until stop().
  void run() {
    do_accept();
    schedule_tick();
    ioc_.run();
  }

  void start() {
    thread_ = std::thread([this] { run(); });
  }

  void stop() {
    ioc_.stop();
    if (thread_.joinable() && thread_.get_id() != std::this_thread::get_id()) thread_.join();
  }

  /// Runs `f` on the io thread.
  void dispatch(std::function<void()> f) { asio::post(ioc_, std::move(f)); }

  // ---- io-thread only ----

  void attach(int id, std::shared_ptr<WsSession> s) { sessions_[id] = std::move(s); }
  void detach(int id) { sessions_.erase(id); }

  /// Lets the host process its queue and fans out what it produced.
  void pump() {
    host_.pump();
    for (auto& out : host_.take_outbox()) {
      if (out.connection == Outgoing::kBroadcast) {
        auto targets = sessions_;
        for (auto& [id, s] : targets) {
          if (id != out.except) s->send(out.body, out.close_after);
        }
      } else if (const auto it = sessions_.find(out.connection); it != sessions_.end()) {
        it->second->send(out.body, out.close_after);
      }
    }
  }

 private:
  void do_accept() {
    acceptor_.async_accept(asio::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec == asio::error::operation_aborted) return;
      if (!ec) std::make_shared<HttpSession>(std::move(socket), *this)->run();
      do_accept();
    });
  }

  void schedule_tick() {
    timer_.expires_after(std::chrono::milliseconds(options_.tick_ms));
    timer_.async_wait([this](beast::error_code ec) {
      if (ec) return;
      pump();
      schedule_tick();
    });
  }

  SessionHost& host_;
  ServerOptions options_;
  asio::io_context ioc_{1};
  tcp::acceptor acceptor_;
  asio::steady_timer timer_;
  std::map<int, std::shared_ptr<WsSession>> sessions_;
  std::thread thread_;
};

// ---- HttpSession ----------------------------------------------------------

inline void HttpSession::on_read(beast::error_code ec, std::size_t) {
  if (ec) return;  // closed or timed out
  if (websocket::is_upgrade(request_)) {
    // Hand the socket to the io thread that owns the host.
    auto socket = stream_.release_socket();
    auto request = std::move(request_);
    server_.dispatch([socket = std::make_shared<tcp::socket>(std::move(socket)), request = std::move(request),
                      &server = server_]() mutable {
      std::make_shared<WsSession>(std::move(*socket), server)->run(std::move(request));
    });
    return;
  }

  response_ = std::make_shared<http::response<http::string_body>>();
  auto& res = *response_;
  res.version(request_.version());
  res.set(http::field::server, "duet");
  res.keep_alive(request_.keep_alive());
  const auto path = resolve_static(server_.options().static_root, std::string(request_.target()));
  if (request_.method() != http::verb::get && request_.method() != http::verb::head) {
    res.result(http::status::method_not_allowed);
    res.body() = "method not allowed\n";
  } else if (!path) {
    res.result(http::status::not_found);
    res.set(http::field::content_type, "text/plain");
    res.body() = "not found\n";
  } else {
    std::ifstream in(*path, std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    res.result(http::status::ok);
    res.set(http::field::content_type, mime_type(*path));
    res.body() = request_.method() == http::verb::head ? std::string() : body.str();
  }
  res.prepare_payload();
  http::async_write(stream_, res,
                    beast::bind_front_handler(&HttpSession::on_write, shared_from_this(), res.keep_alive()));
}

// ---- WsSession ------------------------------------------------------------

inline void WsSession::run(http::request<http::string_body> request) {
  beast::get_lowest_layer(ws_).expires_never();
  ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
  ws_.async_accept(request, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
}

inline void WsSession::on_accept(beast::error_code ec) {
  if (ec) return;
  id_ = server_.host().connect();
  server_.attach(id_, shared_from_this());
  server_.pump();
  do_read();
}

inline void WsSession::do_read() {
  ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
}

inline void WsSession::on_read(beast::error_code ec, std::size_t) {
  if (ec) return drop();
  const std::string frame = beast::buffers_to_string(buffer_.data());
  buffer_.consume(buffer_.size());
  try {
    server_.host().receive(id_, endpoint_.decode(frame));
  } catch (const wire::ProtocolError& e) {
    send(wire::Error{e.code(), e.what()}, true);
    return;
  }
  server_.pump();
  if (!closing_) do_read();
}

inline void WsSession::send(const wire::Payload& body, bool close_after) {
  if (closing_ || dropped_) return;
  outbox_.push_back(endpoint_.encode(body));
  closing_ = close_after;
  if (outbox_.size() == 1) do_write();
}

inline void WsSession::do_write() {
  ws_.text(true);
  ws_.async_write(asio::buffer(outbox_.front()), beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
}

inline void WsSession::on_write(beast::error_code ec, std::size_t) {
  if (ec) return drop();
  outbox_.pop_front();
  if (!outbox_.empty()) return do_write();
  if (closing_) {
    auto self = shared_from_this();
    ws_.async_close(websocket::close_code::policy_error, [self](beast::error_code) { self->drop(); });
  }
}

inline void WsSession::drop() {
  if (dropped_) return;
  dropped_ = true;
  if (id_) {
    server_.host().disconnect(id_);
    server_.detach(id_);
  }
}

}  // namespace duet::net
