"""候选区域语义匹配与稠密光流"""
