#pragma once

#include <stdexcept>
#include <string>

namespace metricforge {

/// Base class for every contract violation the library reports.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A row with (near-)zero norm cannot be scaled to the unit sphere.
struct NormalizeZeroVector : Error {
  using Error::Error;
};

/// An anchor has no same-class partner in the batch.
struct NoPositives : Error {
  using Error::Error;
};

/// An anchor has no other-class partner in the batch.
struct NoNegatives : Error {
  using Error::Error;
};

/// Two distinct samples sit at (near-)zero distance; gradients through the
/// distance are undefined there and usually signal collapsed embeddings.
struct DegenerateDistance : Error {
  using Error::Error;
};

/// Train-mode batch statistics need at least two samples.
struct BatchTooSmall : Error {
  using Error::Error;
};

/// A loss came back NaN or infinite; the training step is aborted.
struct NonFiniteLoss : Error {
  using Error::Error;
};

/// The dataset holds fewer distinct classes than a batch requires.
struct TooFewClasses : Error {
  using Error::Error;
};

/// Ranking metrics need a non-empty gallery.
struct EmptyGallery : Error {
  using Error::Error;
};

/// A configuration value is out of its documented range.
struct ConfigInvalid : Error {
  using Error::Error;
};

/// Malformed input file; the message names the offending line.
struct ParseError : Error {
  using Error::Error;
};

}  // namespace metricforge
