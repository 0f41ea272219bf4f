"""Test support: a module builder, a scan-based branch oracle, a reference
interpreter and a random structured-program generator."""

from .builder import FunctionBuilder, ModuleBuilder, sleb, uleb
