# 核心模組
