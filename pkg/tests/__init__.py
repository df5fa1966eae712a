# Tests for glyphprior
