#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace carma {

using WarningSink = std::function<void(std::string_view)>;

// Emits a diagnostic through the installed sink (stderr by default).
void warn(std::string_view message);

// Installs a new sink and returns the previous one. Passing an empty
// function silences warnings.
WarningSink set_warning_sink(WarningSink sink);

// Captures warnings for the lifetime of the object; used by tests.
class ScopedWarningCapture {
 public:
  ScopedWarningCapture();
  ~ScopedWarningCapture();
  ScopedWarningCapture(const ScopedWarningCapture&) = delete;
  ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

  const std::string& text() const { return text_; }
  int count() const { return count_; }

 private:
  WarningSink previous_;
  std::string text_;
  int count_ = 0;
};

}  // namespace carma
