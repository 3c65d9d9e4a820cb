"""匹配、光流、真值与评测服务"""
