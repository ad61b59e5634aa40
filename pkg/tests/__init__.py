"""Test package for mifcn."""
