# 估計器模組
