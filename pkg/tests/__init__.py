"""Tests for the s4lfsc pipeline"""
