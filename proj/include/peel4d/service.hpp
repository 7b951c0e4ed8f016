#pragma once

// WebSocket render service. One network thread runs all socket I/O; one
// render thread owns the engine. Each connection holds at most one pending
// request (newer requests replace it) and connections with work are served
// round-robin.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include "peel4d/inference.hpp"
#include "peel4d/service_protocol.hpp"

namespace peel4d {

struct ServiceConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0: pick a free port
  int max_width = 2048;
  int max_height = 2048;
};

class RenderService {
 public:
  RenderService(InferenceEngine& engine, ServiceConfig cfg)
      : engine_(engine), cfg_(std::move(cfg)), acceptor_(ioc_) {
    namespace net = boost::asio;
    using tcp = net::ip::tcp;
    boost::system::error_code ec;
    const auto addr = net::ip::make_address(cfg_.address, ec);
    if (ec) throw ConfigError("invalid bind address " + cfg_.address);
    const tcp::endpoint ep(addr, cfg_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep, ec);
    if (ec) throw std::runtime_error("cannot bind " + cfg_.address + ":" + std::to_string(cfg_.port) + ": " + ec.message());
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
    do_accept();
    io_thread_ = std::thread([this] { ioc_.run(); });
    worker_ = std::thread([this] { render_loop(); });
  }

  RenderService(const RenderService&) = delete;
  RenderService& operator=(const RenderService&) = delete;

  ~RenderService() { stop(); }

  unsigned short port() const { return port_; }

  void stop() {
    {
      std::lock_guard lock(m_);
      if (stopped_) return;
      stopped_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
    ioc_.stop();
    if (io_thread_.joinable()) io_thread_.join();
    stopped_cv_.notify_all();
  }

  // Blocks until stop() has been called.
  void wait() {
    std::unique_lock lock(m_);
    stopped_cv_.wait(lock, [&] { return stopped_; });
  }

  std::size_t frames_sent() const { return frames_sent_; }
  std::size_t errors_sent() const { return errors_sent_; }
  std::size_t superseded() const { return superseded_; }

 private:
  class Session;
  using Message = std::shared_ptr<const std::vector<std::uint8_t>>;

  void do_accept();
  void enqueue(const std::shared_ptr<Session>& s);
  void render_loop();

  InferenceEngine& engine_;
  ServiceConfig cfg_;
  boost::asio::io_context ioc_;
  boost::asio::ip::tcp::acceptor acceptor_;
  unsigned short port_ = 0;
  std::mutex m_;
  std::condition_variable cv_, stopped_cv_;
  std::deque<std::weak_ptr<Session>> ready_;
  bool stopped_ = false;
  std::atomic<std::size_t> frames_sent_{0}, errors_sent_{0}, superseded_{0};
  std::thread io_thread_, worker_;
};

class RenderService::Session : public std::enable_shared_from_this<RenderService::Session> {
 public:
  Session(RenderService& svc, boost::asio::ip::tcp::socket socket) : svc_(svc), ws_(std::move(socket)) {}

  void run() {
    namespace websocket = boost::beast::websocket;
    ws_.set_option(websocket::stream_base::timeout::suggested(boost::beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](boost::beast::error_code ec) {
      if (!ec) self->do_read();
    });
  }

  // Thread-safe: hops onto the network thread.
  void send(Message msg, bool text) {
    boost::asio::post(ws_.get_executor(), [self = shared_from_this(), msg = std::move(msg), text] {
      self->outq_.push_back({std::move(msg), text});
      if (self->outq_.size() == 1) self->do_write();
    });
  }

  void send_error(const RequestError& e) {
    const auto s = error_json(e);
    ++svc_.errors_sent_;
    send(std::make_shared<const std::vector<std::uint8_t>>(s.begin(), s.end()), true);
  }

  CoalescingSlot slot;

 private:
  void do_read() {
    ws_.async_read(buf_, [self = shared_from_this()](boost::beast::error_code ec, std::size_t) { self->on_read(ec); });
  }

  void on_read(boost::beast::error_code ec) {
    if (ec) return;  // closed or failed; the session dies with its last handler
    if (!ws_.got_text()) {
      send_error({0, "requests must be text frames"});
    } else {
      const std::string text = boost::beast::buffers_to_string(buf_.data());
      auto parsed = parse_request(text, svc_.cfg_.max_width, svc_.cfg_.max_height);
      if (auto* err = std::get_if<RequestError>(&parsed))
        send_error(*err);
      else if (slot.put(std::get<RenderRequest>(parsed)))
        ++svc_.superseded_;
      else
        svc_.enqueue(shared_from_this());
    }
    buf_.consume(buf_.size());
    do_read();
  }

  void do_write() {
    auto& [msg, text] = outq_.front();
    ws_.text(text);
    ws_.async_write(boost::asio::buffer(*msg), [self = shared_from_this()](boost::beast::error_code ec, std::size_t) {
      self->outq_.pop_front();
      if (ec) {
        self->outq_.clear();
        return;
      }
      if (!self->outq_.empty()) self->do_write();
    });
  }

  RenderService& svc_;
  boost::beast::websocket::stream<boost::beast::tcp_stream> ws_;
  boost::beast::flat_buffer buf_;
  std::deque<std::pair<Message, bool>> outq_;
};

inline void RenderService::do_accept() {
  acceptor_.async_accept([this](boost::beast::error_code ec, boost::asio::ip::tcp::socket socket) {
    if (ec) return;
    std::make_shared<Session>(*this, std::move(socket))->run();
    do_accept();
  });
}

inline void RenderService::enqueue(const std::shared_ptr<Session>& s) {
  {
    std::lock_guard lock(m_);
    ready_.push_back(s);
  }
  cv_.notify_one();
}

inline void RenderService::render_loop() {
  for (;;) {
    std::shared_ptr<Session> s;
    {
      std::unique_lock lock(m_);
      cv_.wait(lock, [&] { return stopped_ || !ready_.empty(); });
      if (stopped_) return;
      s = ready_.front().lock();
      ready_.pop_front();
    }
    if (!s) continue;
    // A request arriving after take() re-queues the session at the back.
    const auto req = s->slot.take();
    if (!req) continue;
    try {
      auto frame = std::make_shared<const std::vector<std::uint8_t>>(engine_.serve(*req));
      ++frames_sent_;
      s->send(std::move(frame), false);
    } catch (const std::exception& e) {
      s->send_error({req->id, std::string("render failed: ") + e.what()});
    }
  }
}

}  // namespace peel4d
