"""配置、错误类型与任务队列"""
