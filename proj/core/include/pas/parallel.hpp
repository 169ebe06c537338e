#pragma once

namespace pas {

// Worker count for internal data-parallel loops. Reads PAS_THREADS once;
// defaults to 1. Results never depend on this value.
int thread_count();

}  // namespace pas
