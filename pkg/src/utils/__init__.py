# 工具模組
