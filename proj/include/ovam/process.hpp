#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ovam/error.hpp"

namespace ovam {

/// Splits a command template on whitespace (no shell quoting) and substitutes
/// {name} placeholders inside each argument.
inline std::vector<std::string> expand_command(const std::string& tmpl, const std::map<std::string, std::string>& vars) {
  std::vector<std::string> argv;
  std::istringstream in(tmpl);
  for (std::string word; in >> word;) {
    for (const auto& [name, value] : vars) {
      const std::string key = "{" + name + "}";
      for (std::size_t pos = 0; (pos = word.find(key, pos)) != std::string::npos; pos += value.size())
        word.replace(pos, key.size(), value);
    }
    argv.push_back(std::move(word));
  }
  return argv;
}

/// Runs argv without a shell and returns the exit status (127 if it could
/// not be started).
inline int run_process(const std::vector<std::string>& argv) {
  require(!argv.empty(), ErrorKind::argument, "empty command");
  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const pid_t pid = fork();
  if (pid < 0) throw Error(ErrorKind::io, "fork failed");
  if (pid == 0) {
    execvp(args[0], args.data());
    _exit(127);
  }
  int status = 0;
  while (waitpid(pid, &status, 0) < 0)
    if (errno != EINTR) throw Error(ErrorKind::io, "waitpid failed");
  return WIFEXITED(status) ? WEXITSTATUS(status) : 128;
}

}  // namespace ovam
