# Tests package for RemixSep
