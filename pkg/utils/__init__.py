# Utils package

