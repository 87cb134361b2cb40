"""
Module tests for the quantized_rnn package.
"""
