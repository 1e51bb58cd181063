# stepfit 套件
