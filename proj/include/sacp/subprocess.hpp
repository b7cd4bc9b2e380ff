#pragma once

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <optional>
#include <string>

#include <fcntl.h>
#include <poll.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include "sacp/error.hpp"

extern char **environ;

namespace sacp {

/// Child process started through /bin/sh -c with its stdin and stdout
/// connected to pipes; stderr is inherited. Lines are '\n'-terminated.
class ChildProcess {
public:
  enum class ReadStatus { line, timeout, closed };

  explicit ChildProcess(const std::string &command) {
    // A child that exits early must surface as a write error, not a signal.
    std::signal(SIGPIPE, SIG_IGN);
    int in[2], out[2];
    if (pipe2(in, O_CLOEXEC) != 0) throw RuntimeFailure(std::string("pipe: ") + std::strerror(errno));
    if (pipe2(out, O_CLOEXEC) != 0) {
      ::close(in[0]);
      ::close(in[1]);
      throw RuntimeFailure(std::string("pipe: ") + std::strerror(errno));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, in[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, out[1], STDOUT_FILENO);
    const char *argv[] = {"/bin/sh", "-c", command.c_str(), nullptr};
    const int rc = posix_spawn(&pid_, "/bin/sh", &actions, nullptr, const_cast<char *const *>(argv), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(in[0]);
    ::close(out[1]);
    if (rc != 0) {
      ::close(in[1]);
      ::close(out[0]);
      throw RuntimeFailure("cannot spawn '" + command + "': " + std::strerror(rc));
    }
    to_child_ = in[1];
    from_child_ = out[0];
  }

  ChildProcess(const ChildProcess &) = delete;
  ChildProcess &operator=(const ChildProcess &) = delete;

  ~ChildProcess() { terminate(std::chrono::milliseconds(2000)); }

  /// False if the child no longer reads its input.
  bool write_line(const std::string &line) {
    if (to_child_ < 0) return false;
    std::string buf = line;
    buf += '\n';
    std::size_t done = 0;
    while (done < buf.size()) {
      const auto n = ::write(to_child_, buf.data() + done, buf.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        return false;
      }
      done += static_cast<std::size_t>(n);
    }
    return true;
  }

  ReadStatus read_line(std::string &line, std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
      if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
        line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return ReadStatus::line;
      }
      if (eof_) return ReadStatus::closed;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return ReadStatus::timeout;
      pollfd pfd{from_child_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) continue;
      char chunk[4096];
      const auto n = ::read(from_child_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        eof_ = true;
      } else if (n == 0) {
        eof_ = true;
      } else {
        buffer_.append(chunk, static_cast<std::size_t>(n));
      }
    }
  }

  /// Closes stdin and waits for exit, killing the child after `grace`.
  /// Returns the exit status, or -1 if the child had to be killed.
  int terminate(std::chrono::milliseconds grace) {
    if (pid_ <= 0) return exit_status_;
    close_input();
    const auto deadline = std::chrono::steady_clock::now() + grace;
    int status = 0;
    while (true) {
      const auto r = ::waitpid(pid_, &status, WNOHANG);
      if (r == pid_) {
        exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        break;
      }
      if (r < 0 && errno != EINTR) break;
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
        exit_status_ = -1;
        break;
      }
      ::usleep(2000);
    }
    pid_ = -1;
    if (from_child_ >= 0) ::close(from_child_);
    from_child_ = -1;
    return exit_status_;
  }

  void close_input() {
    if (to_child_ >= 0) ::close(to_child_);
    to_child_ = -1;
  }

private:
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
  bool eof_ = false;
  int exit_status_ = -1;
};

} // namespace sacp
