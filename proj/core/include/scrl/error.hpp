#pragma once

#include <stdexcept>
#include <string>

namespace scrl {

// Contract violation raised by any module. `module()` names the subsystem
// that detected it so the CLI can report where a run failed.
class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)), detail_(what) {}

  const std::string& module() const noexcept { return module_; }
  const std::string& detail() const noexcept { return detail_; }  // message without the module prefix

 private:
  std::string module_;
  std::string detail_;
};

}  // namespace scrl
